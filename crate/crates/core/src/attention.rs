//! Weight-tied transformer block with per-invocation LoRA adapters and
//! NTK-rescalable rotary embeddings.
//!
//! A model owns one or two [`SharedBlockParams`]; every invocation site along
//! the backbone reuses the same storage (cloning the handle does not copy the
//! weights), and carries its own private [`LoraSet`] so the tied computation
//! can still differ per depth. Incremental decoding stores keys and values in
//! a per-site [`KvCache`] — the only inference memory that grows with context
//! length.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::numerics::{Dtype, Tape, Tensor};
use crate::ssm::RMS_EPS;

const MASKED: f64 = -1e30;

// ─── rotary embeddings ──────────────────────────────────────────────────────

/// Rotary embedding configuration. `s` is the context-extension scaling
/// factor applied through [`ntk_rescale`]; `divisor_override`, when set,
/// replaces the computed `s^(d_emb/(d_emb-1))` divisor entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotaryConfig {
    /// Rotary embedding dimension (the per-head dim).
    pub d_emb: usize,
    pub base: f64,
    pub s: f64,
    pub enabled: bool,
    #[serde(default)]
    pub divisor_override: Option<f64>,
}

impl Default for RotaryConfig {
    fn default() -> Self {
        RotaryConfig { d_emb: 16, base: 10_000.0, s: 1.0, enabled: true, divisor_override: None }
    }
}

impl RotaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb < 2 || self.d_emb % 2 != 0 {
            return Err(Error::config("rotary.d_emb", "must be even and >= 2"));
        }
        if self.s < 1.0 {
            return Err(Error::config("rotary.s", "must be >= 1"));
        }
        if self.base <= 0.0 {
            return Err(Error::config("rotary.base", "must be positive"));
        }
        Ok(())
    }
}

/// Base angles `θ_d = base^(-2d/d_emb)` for `d = 0 .. d_emb/2`.
pub fn rotary_angles(cfg: &RotaryConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let half = cfg.d_emb / 2;
    Ok((0..half)
        .map(|d| cfg.base.powf(-2.0 * d as f64 / cfg.d_emb as f64))
        .collect())
}

/// The angle divisor `s^(d_emb/(d_emb-1))`, uniform across dimensions.
pub fn rotary_divisor(s: f64, d_emb: usize) -> f64 {
    s.powf(d_emb as f64 / (d_emb as f64 - 1.0))
}

/// Rescale rotary angles for context extension: every angle is divided by
/// `s^(d_emb/(d_emb-1))`. `s = 1` is a bitwise identity.
pub fn ntk_rescale(theta: &[f64], s: f64, d_emb: usize) -> Result<Vec<f64>> {
    if s < 1.0 {
        return Err(Error::config("rotary.s", "must be >= 1"));
    }
    if d_emb < 2 {
        return Err(Error::config("rotary.d_emb", "must be >= 2"));
    }
    if s == 1.0 {
        return Ok(theta.to_vec());
    }
    let divisor = rotary_divisor(s, d_emb);
    Ok(theta.iter().map(|t| t / divisor).collect())
}

/// Effective angles for a config: base angles through the NTK rescale, or
/// divided by the override divisor when one is set. `None` when disabled.
pub fn effective_angles(cfg: &RotaryConfig) -> Result<Option<Vec<f64>>> {
    if !cfg.enabled {
        return Ok(None);
    }
    let theta = rotary_angles(cfg)?;
    let theta = match cfg.divisor_override {
        Some(divisor) => {
            if divisor <= 0.0 {
                return Err(Error::config("rotary.divisor_override", "must be positive"));
            }
            theta.iter().map(|t| t / divisor).collect()
        }
        None => ntk_rescale(&theta, cfg.s, cfg.d_emb)?,
    };
    Ok(Some(theta))
}

// ─── LoRA ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 7] = [
        LoraTarget::Q,
        LoraTarget::K,
        LoraTarget::V,
        LoraTarget::O,
        LoraTarget::Up,
        LoraTarget::Gate,
        LoraTarget::Down,
    ];

    pub const ATTENTION: [LoraTarget; 4] =
        [LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O];

    pub const MLP: [LoraTarget; 3] = [LoraTarget::Up, LoraTarget::Gate, LoraTarget::Down];

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
            LoraTarget::Up => "up",
            LoraTarget::Gate => "gate",
            LoraTarget::Down => "down",
        }
    }
}

/// Low-rank additive delta `ΔW = (α/r)·B·A` on one linear of the shared
/// block. `B` starts at zero, so a fresh adapter leaves the block's function
/// untouched.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    /// `[rank, d_in]`
    pub a: Tensor,
    /// `[d_out, rank]`, zero-initialized
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn init(
        target: LoraTarget,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dtype: Dtype,
        rng: &mut ChaCha8Rng,
    ) -> LoraAdapter {
        LoraAdapter {
            target,
            a: init::randn(rng, vec![rank, d_in], 0.02, dtype).requires_grad(true),
            b: Tensor::zeros(vec![d_out, rank], dtype).requires_grad(true),
            rank,
            alpha,
        }
    }

    fn check_against(&self, w: &Tensor) -> Result<()> {
        let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
        if self.a.shape() != [self.rank, d_in] || self.b.shape() != [d_out, self.rank] {
            return Err(Error::shape(format!(
                "adapter {:?}/{:?} does not patch weight {:?}",
                self.a.shape(),
                self.b.shape(),
                w.shape()
            )));
        }
        Ok(())
    }
}

/// Apply one linear with an optional low-rank delta:
/// `y = x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ`. The base weight is never touched.
pub fn lora_apply(
    tape: &mut Tape,
    w: &Tensor,
    adapter: Option<&LoraAdapter>,
    x: &Tensor,
) -> Result<Tensor> {
    match adapter {
        Some(a) => lora_linear(tape, x, w, None, &[a]),
        None => tape.linear(x, w, None),
    }
}

/// Linear with any number of stacked adapters on the same weight.
pub(crate) fn lora_linear(
    tape: &mut Tape,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    adapters: &[&LoraAdapter],
) -> Result<Tensor> {
    let mut y = tape.linear(x, w, bias)?;
    for ad in adapters {
        ad.check_against(w)?;
        let t = tape.matmul_tb(x, &ad.a)?;
        let t = tape.matmul_tb(&t, &ad.b)?;
        let t = tape.scale(&t, ad.alpha / ad.rank as f64)?;
        y = tape.add(&y, &t)?;
    }
    Ok(y)
}

/// The adapters one invocation site carries, at most one per target.
#[derive(Debug, Clone, Default)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn get(&self, target: LoraTarget) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    pub fn init(
        targets: &[LoraTarget],
        d_model: usize,
        attn_width: usize,
        mlp_width: usize,
        rank: usize,
        alpha: f64,
        dtype: Dtype,
        rng: &mut ChaCha8Rng,
    ) -> LoraSet {
        let adapters = targets
            .iter()
            .map(|&t| {
                let (d_in, d_out) = match t {
                    LoraTarget::Q | LoraTarget::K | LoraTarget::V => (d_model, attn_width),
                    LoraTarget::O => (attn_width, d_model),
                    LoraTarget::Up | LoraTarget::Gate => (d_model, mlp_width),
                    LoraTarget::Down => (mlp_width, d_model),
                };
                LoraAdapter::init(t, d_in, d_out, rank, alpha, dtype, rng)
            })
            .collect();
        LoraSet { adapters }
    }
}

// ─── KV cache ────────────────────────────────────────────────────────────────

/// Per-invocation-site key/value store. Pre-allocates its backing buffers to
/// `capacity` entries so decode never allocates; the reported byte size
/// counts cached entries at the declared dtype.
#[derive(Debug, Clone)]
pub struct KvCache {
    k: Vec<f64>,
    v: Vec<f64>,
    width: usize,
    d_head: usize,
    capacity: usize,
    dtype: Dtype,
}

impl KvCache {
    pub fn new(n_heads: usize, d_head: usize, capacity: usize, dtype: Dtype) -> KvCache {
        let width = n_heads * d_head;
        KvCache {
            k: Vec::with_capacity(capacity * width),
            v: Vec::with_capacity(capacity * width),
            width,
            d_head,
            capacity,
            dtype,
        }
    }

    pub fn len(&self) -> usize {
        self.k.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Bytes of cached entries: `len · n_heads · d_head · 2 · dtype width`.
    pub fn bytes(&self) -> usize {
        (self.k.len() + self.v.len()) * self.dtype.width()
    }

    fn append_rows(&mut self, k: &Tensor, v: &Tensor) -> Result<()> {
        let rows = k.shape()[0];
        if self.len() + rows > self.capacity {
            return Err(Error::Capacity(format!(
                "kv cache at {}/{} entries cannot take {rows} more",
                self.len(),
                self.capacity
            )));
        }
        self.k.extend_from_slice(k.data());
        self.v.extend_from_slice(v.data());
        Ok(())
    }

    /// Cached keys for one head as a `[len, d_head]` constant tensor.
    fn head_k(&self, head: usize) -> Tensor {
        self.gather(&self.k, head)
    }

    fn head_v(&self, head: usize) -> Tensor {
        self.gather(&self.v, head)
    }

    fn gather(&self, buf: &[f64], head: usize) -> Tensor {
        let len = self.len();
        let mut data = Vec::with_capacity(len * self.d_head);
        for row in 0..len {
            let start = row * self.width + head * self.d_head;
            data.extend_from_slice(&buf[start..start + self.d_head]);
        }
        Tensor::from_raw(vec![len, self.d_head], self.dtype, data)
    }
}

// ─── shared block ────────────────────────────────────────────────────────────

/// One weight-tied transformer block: pre-norm causal attention and a
/// pre-norm gated MLP, both with residual connections. The same instance is
/// invoked at every site that references it; mutating it is visible
/// everywhere.
#[derive(Debug, Clone)]
pub struct SharedBlockParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub attn_norm_w: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm_w: Tensor,
    pub w_up: Tensor,
    pub w_gate: Tensor,
    pub w_down: Tensor,
}

impl SharedBlockParams {
    pub fn init(
        d_model: usize,
        n_heads: usize,
        d_head: usize,
        mlp_width: usize,
        dtype: Dtype,
        out_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> SharedBlockParams {
        let aw = n_heads * d_head;
        let din = (d_model as f64).powf(-0.5);
        SharedBlockParams {
            d_model,
            n_heads,
            d_head,
            attn_norm_w: init::ones(vec![d_model], dtype).requires_grad(true),
            wq: init::randn(rng, vec![aw, d_model], din, dtype).requires_grad(true),
            wk: init::randn(rng, vec![aw, d_model], din, dtype).requires_grad(true),
            wv: init::randn(rng, vec![aw, d_model], din, dtype).requires_grad(true),
            wo: init::randn(rng, vec![d_model, aw], out_scale * (aw as f64).powf(-0.5), dtype)
                .requires_grad(true),
            mlp_norm_w: init::ones(vec![d_model], dtype).requires_grad(true),
            w_up: init::randn(rng, vec![mlp_width, d_model], din, dtype).requires_grad(true),
            w_gate: init::randn(rng, vec![mlp_width, d_model], din, dtype).requires_grad(true),
            w_down: init::randn(
                rng,
                vec![d_model, mlp_width],
                out_scale * (mlp_width as f64).powf(-0.5),
                dtype,
            )
            .requires_grad(true),
        }
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn mlp_width(&self) -> usize {
        self.w_up.shape()[0]
    }

    /// Deep copy with fresh tensor identities — an *untied* clone, used as
    /// the reference model in tying checks.
    pub fn untied_copy(&self) -> SharedBlockParams {
        SharedBlockParams {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            attn_norm_w: self.attn_norm_w.deep_copy(),
            wq: self.wq.deep_copy(),
            wk: self.wk.deep_copy(),
            wv: self.wv.deep_copy(),
            wo: self.wo.deep_copy(),
            mlp_norm_w: self.mlp_norm_w.deep_copy(),
            w_up: self.w_up.deep_copy(),
            w_gate: self.w_gate.deep_copy(),
            w_down: self.w_down.deep_copy(),
        }
    }
}

/// Forward through the shared block at one invocation site.
///
/// With a cache, `positions` must continue the cache (decode / incremental
/// prefill); without one the call is a full-sequence causal pass. Rotary
/// angles, when given, are applied to q and k. The site's adapter sets are
/// applied additively to their target linears; several sets may stack.
pub fn shared_block_forward(
    tape: &mut Tape,
    x: &Tensor,
    block: &SharedBlockParams,
    loras: &[&LoraSet],
    rotary: Option<&[f64]>,
    mut cache: Option<&mut KvCache>,
    positions: &[usize],
) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != block.d_model {
        return Err(Error::shape(format!("block input {:?}, expected [L, {}]", xs, block.d_model)));
    }
    let len = xs[0];
    if positions.len() != len {
        return Err(Error::contract(format!("{} positions for {len} rows", positions.len())));
    }
    for (i, w) in positions.windows(2).enumerate() {
        if w[1] != w[0] + 1 {
            return Err(Error::contract(format!("positions not consecutive at index {i}")));
        }
    }
    if let Some(c) = cache.as_deref() {
        if positions[0] != c.len() {
            return Err(Error::contract(format!(
                "positions start at {} but cache holds {} entries",
                positions[0],
                c.len()
            )));
        }
    } else if positions[0] != 0 {
        return Err(Error::contract("without a cache, positions must start at 0"));
    }

    let (heads, dh) = (block.n_heads, block.d_head);
    let dtype = x.dtype();

    let stack = |tape: &mut Tape, x: &Tensor, w: &Tensor, t: LoraTarget| -> Result<Tensor> {
        let ads: Vec<&LoraAdapter> =
            loras.iter().flat_map(|s| s.adapters.iter().filter(move |a| a.target == t)).collect();
        lora_linear(tape, x, w, None, &ads)
    };

    let h = tape.rmsnorm(x, &block.attn_norm_w, RMS_EPS)?;
    let mut q = stack(tape, &h, &block.wq, LoraTarget::Q)?;
    let mut k = stack(tape, &h, &block.wk, LoraTarget::K)?;
    let v = stack(tape, &h, &block.wv, LoraTarget::V)?;

    if let Some(theta) = rotary {
        q = tape.apply_rotary(&q, positions, theta, dh)?;
        k = tape.apply_rotary(&k, positions, theta, dh)?;
    }

    if let Some(c) = cache.as_deref_mut() {
        c.append_rows(&k, &v)?;
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.narrow_cols(&q, hd * dh, dh)?;
        let (kh, vh) = match cache.as_deref() {
            Some(c) => (c.head_k(hd), c.head_v(hd)),
            None => (tape.narrow_cols(&k, hd * dh, dh)?, tape.narrow_cols(&v, hd * dh, dh)?),
        };
        let total = kh.shape()[0];
        let scores = tape.matmul_tb(&qh, &kh)?;
        let scores = tape.scale(&scores, scale)?;
        let mask = causal_mask(positions, total, dtype);
        let scores = tape.add(&scores, &mask)?;
        let probs = tape.softmax_lastdim(&scores)?;
        head_outputs.push(tape.matmul(&probs, &vh)?);
    }
    let refs: Vec<&Tensor> = head_outputs.iter().collect();
    let attn = tape.concat_cols(&refs)?;
    let o = stack(tape, &attn, &block.wo, LoraTarget::O)?;
    let x1 = tape.add(x, &o)?;

    let h2 = tape.rmsnorm(&x1, &block.mlp_norm_w, RMS_EPS)?;
    let up = stack(tape, &h2, &block.w_up, LoraTarget::Up)?;
    let gate = stack(tape, &h2, &block.w_gate, LoraTarget::Gate)?;
    let gate = tape.silu(&gate)?;
    let act = tape.mul(&gate, &up)?;
    let down = stack(tape, &act, &block.w_down, LoraTarget::Down)?;
    tape.add(&x1, &down)
}

/// Additive causal mask: row `i` may attend to cache slot `j` iff
/// `j <= positions[i]`. Slots are positions `0..total`.
fn causal_mask(positions: &[usize], total: usize, dtype: Dtype) -> Tensor {
    let rows = positions.len();
    let mut data = vec![0.0; rows * total];
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..total {
            if j > p {
                data[i * total + j] = MASKED;
            }
        }
    }
    Tensor::from_raw(vec![rows, total], dtype, data)
}
