//! Dual-mode generation engine and benchmark harness.
//!
//! Prefill runs the parallel forward once, materializing every SSM state at
//! the final position and filling the KV caches; decode then advances one
//! token at a time with O(1) state memory per Mamba2 block and one KV append
//! per attention site. The bench harness measures time-to-first-token,
//! steady-state decode throughput, and cache memory against a layer-matched
//! pure-transformer baseline; wall-clock numbers are reported, never gated.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{shared_block_forward, KvCache, LoraSet, SharedBlockParams};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::init;
use crate::model::{analytic_cache_bytes, Model, ModelConfig};
use crate::numerics::{Dtype, Tape, Tensor};
use crate::ssm::{mamba2_block_forward, ExecMode, SsmBlockParams, SsmState, RMS_EPS};

// ─── caches ─────────────────────────────────────────────────────────────────

/// All mutable inference state for one generation stream: one fixed-size
/// [`SsmState`] per Mamba2 block, one [`KvCache`] per attention invocation
/// site, and a position counter. Total bytes are constant (SSM) plus linear
/// in position (KV) and nothing else.
#[derive(Debug, Clone)]
pub struct InferenceCaches {
    pub ssm: Vec<SsmState>,
    pub kv: Vec<KvCache>,
    pub position: usize,
}

impl InferenceCaches {
    pub fn new(model: &Model) -> InferenceCaches {
        let cfg = &model.config;
        InferenceCaches {
            ssm: model.fresh_ssm_states(),
            kv: (0..model.sites.len())
                .map(|_| KvCache::new(cfg.attn_heads, cfg.attn_head_dim, cfg.max_seq_len, cfg.dtype))
                .collect(),
            position: 0,
        }
    }

    pub fn ssm_bytes(&self) -> usize {
        self.ssm.iter().map(SsmState::bytes).sum()
    }

    pub fn kv_bytes(&self) -> usize {
        self.kv.iter().map(KvCache::bytes).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.ssm_bytes() + self.kv_bytes()
    }
}

// ─── prefill / decode / generate ────────────────────────────────────────────

/// Run the prompt in parallel mode, returning caches positioned after the
/// prompt and the logits at its last position.
pub fn prefill(model: &Model, prompt: &[u32]) -> Result<(InferenceCaches, Tensor)> {
    if prompt.is_empty() {
        return Err(Error::Input("prefill of an empty prompt".into()));
    }
    let mut caches = InferenceCaches::new(model);
    let mut tape = Tape::inference();
    let logits = model.forward(&mut tape, prompt, ExecMode::Parallel, Some(&mut caches))?;
    let vocab = model.config.vocab_size;
    let last = Tensor::from_vec(
        vec![vocab],
        logits.dtype(),
        logits.data()[(prompt.len() - 1) * vocab..].to_vec(),
    )?;
    Ok((caches, last))
}

/// Advance all caches by one token; returns the next-token logits.
pub fn decode_step(model: &Model, token: u32, caches: &mut InferenceCaches) -> Result<Tensor> {
    let mut tape = Tape::inference();
    let logits = model.forward(&mut tape, &[token], ExecMode::Recurrent, Some(caches))?;
    logits.reshaped(vec![model.config.vocab_size])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    Greedy,
    Temperature(f64),
    TopK { k: usize, temperature: f64 },
}

impl Sampler {
    fn pick(&self, logits: &[f64], rng: &mut ChaCha8Rng) -> u32 {
        match *self {
            Sampler::Greedy => argmax(logits),
            Sampler::Temperature(tau) => sample_scaled(logits, tau, logits.len(), rng),
            Sampler::TopK { k, temperature } => sample_scaled(logits, temperature, k.max(1), rng),
        }
    }
}

fn argmax(xs: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best as u32
}

/// Temperature softmax over the `k` highest logits, sampled by inverse CDF.
fn sample_scaled(logits: &[f64], tau: f64, k: usize, rng: &mut ChaCha8Rng) -> u32 {
    let tau = tau.max(1e-12);
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k.min(logits.len()));
    let max = logits[idx[0]];
    let weights: Vec<f64> = idx.iter().map(|&i| ((logits[i] - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (&i, &w) in idx.iter().zip(&weights) {
        if draw < w {
            return i as u32;
        }
        draw -= w;
    }
    idx[idx.len() - 1] as u32
}

/// Prefill plus `n_tokens` decode steps. Greedy decoding is deterministic;
/// the stochastic samplers are reproducible from `seed`.
pub fn generate(
    model: &Model,
    prompt: &[u32],
    n_tokens: usize,
    sampler: Sampler,
    seed: u64,
) -> Result<Vec<u32>> {
    if n_tokens == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut caches, last) = prefill(model, prompt)?;
    let mut out = Vec::with_capacity(n_tokens);
    let mut token = sampler.pick(last.data(), &mut rng);
    out.push(token);
    for _ in 1..n_tokens {
        let logits = decode_step(model, token, &mut caches)?;
        token = sampler.pick(logits.data(), &mut rng);
        out.push(token);
    }
    Ok(out)
}

// ─── pure-transformer baseline ──────────────────────────────────────────────

/// Layer-matched pure transformer: every Mamba2 block of the hybrid replaced
/// by a standard attention+MLP layer at the same width, plus one layer per
/// shared-attention site (`n_mamba_layers + n_sites` layers total, no weight
/// sharing). Used as the comparison model in the bench harness.
#[derive(Debug, Clone)]
pub struct TransformerBaseline {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<SharedBlockParams>,
    pub final_norm_w: Tensor,
    pub unembed: Tensor,
    pub rotary_theta: Option<Vec<f64>>,
    empty_loras: LoraSet,
}

#[derive(Debug, Clone)]
pub struct BaselineCaches {
    pub kv: Vec<KvCache>,
    pub position: usize,
}

impl BaselineCaches {
    pub fn kv_bytes(&self) -> usize {
        self.kv.iter().map(KvCache::bytes).sum()
    }
}

pub fn build_pure_baseline(config: &ModelConfig, seed: u64) -> Result<TransformerBaseline> {
    config.validate()?;
    let n_layers = config.n_mamba_layers + config.n_sites();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let out_scale = 1.0 / (2.0 * n_layers.max(1) as f64).sqrt();
    let embed = init::randn(&mut rng, vec![config.vocab_size, d], 0.02, config.dtype);
    let layers = (0..n_layers)
        .map(|_| {
            SharedBlockParams::init(
                d,
                config.attn_heads,
                config.attn_head_dim,
                config.mlp_width(),
                config.dtype,
                out_scale,
                &mut rng,
            )
        })
        .collect();
    Ok(TransformerBaseline {
        config: config.clone(),
        embed,
        layers,
        final_norm_w: init::ones(vec![d], config.dtype),
        unembed: init::randn(&mut rng, vec![config.vocab_size, d], (d as f64).powf(-0.5), config.dtype),
        rotary_theta: crate::attention::effective_angles(&config.rotary)?,
        empty_loras: LoraSet::default(),
    })
}

impl TransformerBaseline {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn fresh_caches(&self) -> BaselineCaches {
        let cfg = &self.config;
        BaselineCaches {
            kv: (0..self.layers.len())
                .map(|_| KvCache::new(cfg.attn_heads, cfg.attn_head_dim, cfg.max_seq_len, cfg.dtype))
                .collect(),
            position: 0,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        mut caches: Option<&mut BaselineCaches>,
    ) -> Result<Tensor> {
        let pos0 = caches.as_deref().map_or(0, |c| c.position);
        let positions: Vec<usize> = (pos0..pos0 + tokens.len()).collect();
        let mut x = tape.embedding(&self.embed, tokens)?;
        for (i, layer) in self.layers.iter().enumerate() {
            let kv = caches.as_deref_mut().map(|c| &mut c.kv[i]);
            x = shared_block_forward(
                tape,
                &x,
                layer,
                &[&self.empty_loras],
                self.rotary_theta.as_deref(),
                kv,
                &positions,
            )?;
        }
        let x = tape.rmsnorm(&x, &self.final_norm_w, RMS_EPS)?;
        let logits = tape.linear(&x, &self.unembed, None)?;
        if let Some(c) = caches {
            c.position += tokens.len();
        }
        Ok(logits)
    }

    pub fn prefill(&self, prompt: &[u32]) -> Result<BaselineCaches> {
        let mut caches = self.fresh_caches();
        let mut tape = Tape::inference();
        self.forward(&mut tape, prompt, Some(&mut caches))?;
        Ok(caches)
    }

    pub fn decode_step(&self, token: u32, caches: &mut BaselineCaches) -> Result<Tensor> {
        let mut tape = Tape::inference();
        self.forward(&mut tape, &[token], Some(caches))
    }
}

// ─── bench harness ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub context_len: usize,
    pub ttft_s: f64,
    pub tokens_per_second: f64,
    pub ttft_pure_s: f64,
    pub tokens_per_second_pure: f64,
    pub kv_bytes_hybrid: usize,
    pub kv_bytes_pure: usize,
    pub analytic_kv_hybrid: usize,
    pub analytic_kv_pure: usize,
    pub peak_cache_bytes_hybrid: usize,
    pub ratio_layer_matched: f64,
    pub ratio_site_convention: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEnv {
    pub dtype: Dtype,
    pub threads: usize,
    pub host: String,
}

/// Single-block prefill throughput comparison at a fixed context: tokens/s of
/// one Mamba2 block vs one attention block at the same width. Reported, not
/// thresholded — absolute block-throughput ratios are a hardware-dependent
/// claim.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockMicrobench {
    pub ctx_len: usize,
    pub mamba_tokens_per_s: f64,
    pub attention_tokens_per_s: f64,
    pub mamba_over_attention: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub env: BenchEnv,
    pub block_microbench: Option<BlockMicrobench>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    /// Line-delimited JSON: one `env` record, then one record per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::json!({"kind": "env", "env": &self.env}).to_string());
        out.push('\n');
        if let Some(mb) = &self.block_microbench {
            out.push_str(&serde_json::json!({"kind": "block_microbench", "data": mb}).to_string());
            out.push('\n');
        }
        for row in &self.rows {
            out.push_str(&serde_json::json!({"kind": "row", "data": row}).to_string());
            out.push('\n');
        }
        for w in &self.warnings {
            out.push_str(&serde_json::json!({"kind": "warning", "message": w}).to_string());
            out.push('\n');
        }
        out
    }

    /// Plot-ready tab-separated table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("context_len\tttft_s\ttps\tkv_bytes_hybrid\tkv_bytes_pure\tratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.3}\t{}\t{}\t{:.3}\n",
                r.context_len,
                r.ttft_s,
                r.tokens_per_second,
                r.kv_bytes_hybrid,
                r.kv_bytes_pure,
                r.ratio_layer_matched,
            ));
        }
        out
    }

    pub fn write(&self, jsonl_path: &std::path::Path, table_path: &std::path::Path) -> Result<()> {
        write_atomic(jsonl_path, self.to_jsonl().as_bytes())?;
        write_atomic(table_path, self.to_table().as_bytes())
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    if xs.is_empty() {
        return f64::NAN;
    }
    let mid = xs.len() / 2;
    if xs.len() % 2 == 0 {
        0.5 * (xs[mid - 1] + xs[mid])
    } else {
        xs[mid]
    }
}

/// Benchmark hybrid vs pure baseline over a grid of prompt lengths.
pub fn bench(
    model: &Model,
    baseline: &TransformerBaseline,
    prompt_lens: &[usize],
    gen_len: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size as u32;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &plen in prompt_lens {
        let prompt: Vec<u32> = (0..plen.max(1)).map(|_| rng.gen_range(0..vocab)).collect();
        let mut ttft = Vec::new();
        let mut step_times = Vec::new();
        let mut kv_hybrid = 0;
        let mut peak = 0;
        for _ in 0..repeats.max(1) {
            let t0 = Instant::now();
            let (mut caches, last) = prefill(model, &prompt)?;
            ttft.push(t0.elapsed().as_secs_f64());
            kv_hybrid = caches.kv_bytes();
            let mut token = argmax(last.data());
            for _ in 0..gen_len {
                let t1 = Instant::now();
                let logits = decode_step(model, token, &mut caches)?;
                step_times.push(t1.elapsed().as_secs_f64());
                token = argmax(logits.data());
            }
            peak = peak.max(caches.total_bytes());
        }
        let mut ttft_pure = Vec::new();
        let mut pure_steps = Vec::new();
        let mut kv_pure = 0;
        for _ in 0..repeats.max(1) {
            let t0 = Instant::now();
            let mut caches = baseline.prefill(&prompt)?;
            ttft_pure.push(t0.elapsed().as_secs_f64());
            kv_pure = caches.kv_bytes();
            let mut token = 0u32;
            for _ in 0..gen_len {
                let t1 = Instant::now();
                let logits = baseline.decode_step(token, &mut caches)?;
                pure_steps.push(t1.elapsed().as_secs_f64());
                token = argmax(&logits.data()[..vocab as usize]);
            }
        }
        let analytic = analytic_cache_bytes(&model.config, plen, model.config.dtype.width());
        let med_step = median(&mut step_times);
        let med_step_pure = median(&mut pure_steps);
        if ttft.len() >= 3 {
            let spread = spread_ratio(&mut ttft.clone());
            if spread > 0.5 {
                warnings.push(format!("high TTFT variance at context {plen}: spread {spread:.2}"));
            }
        }
        rows.push(BenchRow {
            context_len: plen,
            ttft_s: median(&mut ttft),
            tokens_per_second: if med_step > 0.0 { 1.0 / med_step } else { f64::NAN },
            ttft_pure_s: median(&mut ttft_pure),
            tokens_per_second_pure: if med_step_pure > 0.0 { 1.0 / med_step_pure } else { f64::NAN },
            kv_bytes_hybrid: kv_hybrid,
            kv_bytes_pure: kv_pure,
            analytic_kv_hybrid: analytic.kv_bytes,
            analytic_kv_pure: analytic.pure_transformer_kv_bytes,
            peak_cache_bytes_hybrid: peak,
            ratio_layer_matched: analytic.ratio_layer_matched,
            ratio_site_convention: analytic.ratio_site_convention,
        });
    }
    Ok(BenchReport {
        rows,
        env: BenchEnv {
            dtype: model.config.dtype,
            threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            host: format!("{} {}", std::env::consts::OS, std::env::consts::ARCH),
        },
        block_microbench: None,
        warnings,
    })
}

fn spread_ratio(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let q1 = xs[xs.len() / 4];
    let q3 = xs[(3 * xs.len()) / 4];
    let med = xs[xs.len() / 2];
    if med > 0.0 {
        (q3 - q1) / med
    } else {
        0.0
    }
}

/// Prefill throughput of one Mamba2 block vs one attention block at a fixed
/// context length.
pub fn block_microbench(config: &ModelConfig, ctx_len: usize, seed: u64) -> Result<BlockMicrobench> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = config.ssm_dims();
    let mamba = SsmBlockParams::init(dims, config.dtype, 1.0, &mut rng);
    let attn = SharedBlockParams::init(
        config.d_model,
        config.attn_heads,
        config.attn_head_dim,
        config.mlp_width(),
        config.dtype,
        1.0,
        &mut rng,
    );
    let x = init::randn(&mut rng, vec![ctx_len, config.d_model], 1.0, config.dtype);
    let positions: Vec<usize> = (0..ctx_len).collect();
    let loras = LoraSet::default();
    let mut tape = Tape::inference();

    let t0 = Instant::now();
    let _ = mamba2_block_forward(&mut tape, &x, &mamba, ExecMode::Parallel, None)?;
    let mamba_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let _ = shared_block_forward(&mut tape, &x, &attn, &[&loras], None, None, &positions)?;
    let attn_s = t1.elapsed().as_secs_f64();
    Ok(BlockMicrobench {
        ctx_len,
        mamba_tokens_per_s: ctx_len as f64 / mamba_s,
        attention_tokens_per_s: ctx_len as f64 / attn_s,
        mamba_over_attention: attn_s / mamba_s,
    })
}

// ─── decode-cost shape ──────────────────────────────────────────────────────

/// Per-step decode wall times for a hybrid model, positions `1..=steps`.
pub fn hybrid_decode_times(model: &Model, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size as u32;
    let (mut caches, _) = prefill(model, &[rng.gen_range(0..vocab)])?;
    let mut times = Vec::with_capacity(steps);
    for _ in 0..steps {
        let token = rng.gen_range(0..vocab);
        let t0 = Instant::now();
        decode_step(model, token, &mut caches)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(times)
}

/// Per-step decode wall times for the pure-transformer baseline.
pub fn baseline_decode_times(base: &TransformerBaseline, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = base.config.vocab_size as u32;
    let mut caches = base.prefill(&[rng.gen_range(0..vocab)])?;
    let mut times = Vec::with_capacity(steps);
    for _ in 0..steps {
        let token = rng.gen_range(0..vocab);
        let t0 = Instant::now();
        base.decode_step(token, &mut caches)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(times)
}

/// Ordinary least squares of `y` against index: `(slope, stderr, mean)`.
pub fn ols_slope(ys: &[f64]) -> (f64, f64, f64) {
    let n = ys.len() as f64;
    let xbar = (n - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - xbar;
        sxx += dx * dx;
        sxy += dx * (y - ybar);
    }
    let slope = sxy / sxx;
    let mut ss_res = 0.0;
    for (i, &y) in ys.iter().enumerate() {
        let fit = ybar + slope * (i as f64 - xbar);
        ss_res += (y - fit) * (y - fit);
    }
    let var = ss_res / (n - 2.0).max(1.0);
    let stderr = (var / sxx).sqrt();
    (slope, stderr, ybar)
}
