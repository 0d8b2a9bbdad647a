//! Full hybrid backbone: a stack of Mamba2 blocks with shared-attention
//! invocations interleaved at a configurable cadence.
//!
//! The shared transformer block(s) are allocated once; invocation sites hold
//! an index into that pool (alternating A, B, A, B, … when there are two)
//! plus their private input/output projections and LoRA adapters. At each
//! site the block consumes `concat(residual, initial_embedding)` projected
//! down to block width, and its output is projected and added back to the
//! residual stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    effective_angles, shared_block_forward, LoraSet, LoraTarget, RotaryConfig, SharedBlockParams,
};
use crate::error::{Error, Result};
use crate::inference::InferenceCaches;
use crate::init;
use crate::numerics::{Dtype, Tape, Tensor};
use crate::ssm::{mamba2_block_forward, ExecMode, SsmBlockParams, SsmDims, SsmState, RMS_EPS};

// ─── configuration ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_mamba_layers: usize,
    /// Invoke shared attention after every k-th Mamba2 block.
    pub attn_every: usize,
    /// 1 or 2 shared transformer blocks, used in alternation.
    pub n_shared_blocks: usize,
    pub rotary: RotaryConfig,
    /// LoRA adapters on the shared attention projections (q,k,v,o).
    pub lora_attention: bool,
    /// LoRA adapters on the shared MLP (up, gate, down).
    pub lora_mlp: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub ssm_expand: usize,
    pub ssm_heads: usize,
    pub ssm_state: usize,
    pub ssm_conv_width: usize,
    pub attn_heads: usize,
    pub attn_head_dim: usize,
    pub mlp_expansion: usize,
    /// Training base sequence length; also the KV-cache capacity.
    pub max_seq_len: usize,
    pub dtype: Dtype,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::tokenizer::BYTE_VOCAB,
            d_model: 128,
            n_mamba_layers: 12,
            attn_every: 6,
            n_shared_blocks: 2,
            rotary: RotaryConfig { d_emb: 32, ..Default::default() },
            lora_attention: false,
            lora_mlp: true,
            lora_rank: 16,
            lora_alpha: 32.0,
            ssm_expand: 2,
            ssm_heads: 4,
            ssm_state: 64,
            ssm_conv_width: 4,
            attn_heads: 4,
            attn_head_dim: 32,
            mlp_expansion: 4,
            max_seq_len: 4096,
            dtype: Dtype::F32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be positive"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.attn_every < 1 {
            return Err(Error::config("attn_every", "must be >= 1"));
        }
        if !(1..=2).contains(&self.n_shared_blocks) {
            return Err(Error::config("n_shared_blocks", "must be 1 or 2"));
        }
        if self.ssm_expand == 0 || self.ssm_heads == 0 {
            return Err(Error::config("ssm_expand/ssm_heads", "must be positive"));
        }
        let d_inner = self.ssm_expand * self.d_model;
        if d_inner % self.ssm_heads != 0 {
            return Err(Error::config(
                "ssm_heads",
                format!("d_inner {d_inner} not divisible by {} heads", self.ssm_heads),
            ));
        }
        self.ssm_dims().validate()?;
        if self.attn_heads == 0 || self.attn_head_dim == 0 {
            return Err(Error::config("attn_heads/attn_head_dim", "must be positive"));
        }
        if self.rotary.enabled {
            self.rotary.validate()?;
            if self.rotary.d_emb != self.attn_head_dim {
                return Err(Error::config(
                    "rotary.d_emb",
                    format!("{} != attn_head_dim {}", self.rotary.d_emb, self.attn_head_dim),
                ));
            }
        }
        if self.mlp_expansion == 0 {
            return Err(Error::config("mlp_expansion", "must be positive"));
        }
        if self.max_seq_len == 0 {
            return Err(Error::config("max_seq_len", "must be positive"));
        }
        if self.lora_rank == 0 && (self.lora_attention || self.lora_mlp) {
            return Err(Error::config("lora_rank", "must be positive when adapters are enabled"));
        }
        Ok(())
    }

    pub fn ssm_dims(&self) -> SsmDims {
        let d_inner = self.ssm_expand * self.d_model;
        SsmDims {
            d_model: self.d_model,
            d_inner,
            n_heads: self.ssm_heads,
            d_head: d_inner / self.ssm_heads,
            d_state: self.ssm_state,
            conv_width: self.ssm_conv_width,
        }
    }

    /// Number of shared-attention invocation sites.
    pub fn n_sites(&self) -> usize {
        self.n_mamba_layers / self.attn_every
    }

    pub fn attn_width(&self) -> usize {
        self.attn_heads * self.attn_head_dim
    }

    pub fn mlp_width(&self) -> usize {
        self.mlp_expansion * self.d_model
    }

    pub fn lora_targets(&self) -> Vec<LoraTarget> {
        let mut targets = Vec::new();
        if self.lora_attention {
            targets.extend(LoraTarget::ATTENTION);
        }
        if self.lora_mlp {
            targets.extend(LoraTarget::MLP);
        }
        targets
    }
}

// ─── presets ────────────────────────────────────────────────────────────────

/// Variant presets mirroring the structural differences between the released
/// model sizes, at desk scale: the 1.2B-style variant uses a single shared
/// block with adapters on both attention and MLP; the 2.7B-style variant has
/// no rotary embedding; the 7B-style variant has rotary, two blocks, and MLP
/// adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantPreset {
    Tiny1p2bStyle,
    Tiny2p7bStyle,
    Tiny7bStyle,
}

impl VariantPreset {
    pub const ALL: [VariantPreset; 3] =
        [VariantPreset::Tiny1p2bStyle, VariantPreset::Tiny2p7bStyle, VariantPreset::Tiny7bStyle];

    pub fn name(self) -> &'static str {
        match self {
            VariantPreset::Tiny1p2bStyle => "tiny-1p2b-style",
            VariantPreset::Tiny2p7bStyle => "tiny-2p7b-style",
            VariantPreset::Tiny7bStyle => "tiny-7b-style",
        }
    }

    pub fn parse(name: &str) -> Result<VariantPreset> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::config("preset", format!("unknown preset `{name}`")))
    }

    pub fn config(self) -> ModelConfig {
        let base = ModelConfig {
            d_model: 64,
            n_mamba_layers: 6,
            attn_every: 3,
            ssm_heads: 2,
            ssm_state: 16,
            attn_heads: 4,
            attn_head_dim: 16,
            rotary: RotaryConfig { d_emb: 16, ..Default::default() },
            max_seq_len: 2048,
            ..ModelConfig::default()
        };
        match self {
            VariantPreset::Tiny1p2bStyle => ModelConfig {
                n_shared_blocks: 1,
                lora_attention: true,
                lora_mlp: true,
                ..base
            },
            VariantPreset::Tiny2p7bStyle => ModelConfig {
                n_shared_blocks: 2,
                lora_attention: false,
                lora_mlp: true,
                rotary: RotaryConfig { enabled: false, ..base.rotary },
                ..base
            },
            VariantPreset::Tiny7bStyle => ModelConfig {
                n_shared_blocks: 2,
                lora_attention: false,
                lora_mlp: true,
                ..base
            },
        }
    }
}

/// Look up a desk-scale preset by name.
pub fn preset(name: &str) -> Result<ModelConfig> {
    Ok(VariantPreset::parse(name)?.config())
}

// ─── model ──────────────────────────────────────────────────────────────────

/// One shared-attention invocation site: which block it uses, where it sits,
/// and its private projections and adapters.
#[derive(Debug, Clone)]
pub struct InvocationSite {
    /// Site fires after this many Mamba2 layers (1-based count).
    pub after_layer: usize,
    pub block_idx: usize,
    /// `[d_model, 2·d_model]`: projects concat(residual, embedding) to block width.
    pub in_proj: Tensor,
    /// `[d_model, d_model]`: projects block output back onto the residual.
    pub out_proj: Tensor,
    pub loras: LoraSet,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub mamba_norms: Vec<Tensor>,
    pub mamba: Vec<SsmBlockParams>,
    pub shared: Vec<SharedBlockParams>,
    pub sites: Vec<InvocationSite>,
    pub final_norm_w: Tensor,
    pub unembed: Tensor,
    /// Effective rotary angles (already rescaled); `None` when disabled.
    pub rotary_theta: Option<Vec<f64>>,
}

/// Build a model deterministically from a config and seed.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dtype = config.dtype;
    let d = config.d_model;
    let n_sites = config.n_sites();
    let residual_writers = (config.n_mamba_layers + n_sites).max(1);
    let out_scale = 1.0 / (2.0 * residual_writers as f64).sqrt();

    let embed = init::randn(&mut rng, vec![config.vocab_size, d], 0.02, dtype).requires_grad(true);

    let dims = config.ssm_dims();
    let mut mamba_norms = Vec::with_capacity(config.n_mamba_layers);
    let mut mamba = Vec::with_capacity(config.n_mamba_layers);
    for _ in 0..config.n_mamba_layers {
        mamba_norms.push(init::ones(vec![d], dtype).requires_grad(true));
        mamba.push(SsmBlockParams::init(dims, dtype, out_scale, &mut rng));
    }

    let mut shared = Vec::with_capacity(config.n_shared_blocks);
    for _ in 0..config.n_shared_blocks {
        shared.push(SharedBlockParams::init(
            d,
            config.attn_heads,
            config.attn_head_dim,
            config.mlp_width(),
            dtype,
            out_scale,
            &mut rng,
        ));
    }

    let targets = config.lora_targets();
    let mut sites = Vec::with_capacity(n_sites);
    for s in 0..n_sites {
        sites.push(InvocationSite {
            after_layer: (s + 1) * config.attn_every,
            block_idx: s % config.n_shared_blocks,
            in_proj: init::randn(&mut rng, vec![d, 2 * d], (2.0 * d as f64).powf(-0.5), dtype)
                .requires_grad(true),
            out_proj: init::randn(&mut rng, vec![d, d], out_scale * (d as f64).powf(-0.5), dtype)
                .requires_grad(true),
            loras: LoraSet::init(
                &targets,
                d,
                config.attn_width(),
                config.mlp_width(),
                config.lora_rank,
                config.lora_alpha,
                dtype,
                &mut rng,
            ),
        });
    }

    let final_norm_w = init::ones(vec![d], dtype).requires_grad(true);
    let unembed =
        init::randn(&mut rng, vec![config.vocab_size, d], (d as f64).powf(-0.5), dtype)
            .requires_grad(true);

    let rotary_theta = effective_angles(&config.rotary)?;

    Ok(Model {
        config,
        embed,
        mamba_norms,
        mamba,
        shared,
        sites,
        final_norm_w,
        unembed,
        rotary_theta,
    })
}

impl Model {
    /// Forward pass. Parallel mode runs the whole token slice; recurrent mode
    /// requires `caches` and a single token. With caches, SSM states are
    /// advanced and KV caches extended in place.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        mode: ExecMode,
        mut caches: Option<&mut InferenceCaches>,
    ) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Input("forward of zero tokens".into()));
        }
        if mode == ExecMode::Recurrent {
            if tokens.len() != 1 {
                return Err(Error::contract("recurrent mode processes one token at a time"));
            }
            if caches.is_none() {
                return Err(Error::contract("recurrent mode requires caches"));
            }
        }
        let len = tokens.len();
        let pos0 = caches.as_deref().map_or(0, |c| c.position);
        let positions: Vec<usize> = (pos0..pos0 + len).collect();

        let x = tape.embedding(&self.embed, tokens)?;
        let emb0 = x.clone();
        let mut x = x;
        let mut site_idx = 0;
        for (i, (norm, block)) in self.mamba_norms.iter().zip(&self.mamba).enumerate() {
            let normed = tape.rmsnorm(&x, norm, RMS_EPS)?;
            let state = caches.as_deref().map(|c| c.ssm[i].clone());
            let (y, new_state) = mamba2_block_forward(tape, &normed, block, mode, state.as_ref())?;
            if let Some(c) = caches.as_deref_mut() {
                c.ssm[i] = new_state;
            }
            x = tape.add(&x, &y)?;

            if (i + 1) % self.config.attn_every == 0 && site_idx < self.sites.len() {
                let site = &self.sites[site_idx];
                let inp = tape.concat_cols(&[&x, &emb0])?;
                let proj = tape.linear(&inp, &site.in_proj, None)?;
                let kv = caches.as_deref_mut().map(|c| &mut c.kv[site_idx]);
                let blk = shared_block_forward(
                    tape,
                    &proj,
                    &self.shared[site.block_idx],
                    &[&site.loras],
                    self.rotary_theta.as_deref(),
                    kv,
                    &positions,
                )?;
                let out = tape.linear(&blk, &site.out_proj, None)?;
                x = tape.add(&x, &out)?;
                site_idx += 1;
            }
        }
        let x = tape.rmsnorm(&x, &self.final_norm_w, RMS_EPS)?;
        let logits = tape.linear(&x, &self.unembed, None)?;
        if let Some(c) = caches {
            c.position += len;
        }
        Ok(logits)
    }

    /// Fresh per-layer SSM states (zeros).
    pub fn fresh_ssm_states(&self) -> Vec<SsmState> {
        let dims = self.config.ssm_dims();
        (0..self.config.n_mamba_layers).map(|_| SsmState::zeros(&dims, self.config.dtype)).collect()
    }

    /// Rebuild the effective rotary angles with a different scaling factor,
    /// leaving weights untouched (context-extension override).
    pub fn with_rotary_scale(&self, s: f64) -> Result<Model> {
        let mut m = self.clone();
        let cfg = RotaryConfig { s, divisor_override: None, ..self.config.rotary.clone() };
        m.rotary_theta = effective_angles(&cfg)?;
        m.config.rotary = cfg;
        Ok(m)
    }

    /// Untie the shared blocks: every site gets its own deep copy. Reference
    /// model for weight-tying checks; outputs are identical to the tied model.
    pub fn untie_shared_blocks(&self) -> Model {
        let mut m = self.clone();
        let mut new_shared = Vec::with_capacity(m.sites.len());
        for site in m.sites.iter_mut() {
            new_shared.push(self.shared[site.block_idx].untied_copy());
            site.block_idx = new_shared.len() - 1;
        }
        m.shared = new_shared;
        m
    }

    pub fn num_params(&self) -> usize {
        let mut total = 0;
        self.visit_params(|_, _, t| total += t.numel());
        total
    }
}

// ─── parameter registry ─────────────────────────────────────────────────────

/// Role of a parameter tensor, the unit at which the quantization policy and
/// footprint accounting operate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    Embedding,
    Unembedding,
    Norm,
    MambaInProj,
    MambaOutProj,
    MambaConvKernel,
    MambaConvBias,
    MambaALog,
    MambaDtW,
    MambaDtB,
    MambaDSkip,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpGate,
    MlpDown,
    SiteInProj,
    SiteOutProj,
    LoraA,
    LoraB,
}

impl ParamRole {
    pub fn name(self) -> &'static str {
        match self {
            ParamRole::Embedding => "embedding",
            ParamRole::Unembedding => "unembedding",
            ParamRole::Norm => "norm",
            ParamRole::MambaInProj => "mamba_in_proj",
            ParamRole::MambaOutProj => "mamba_out_proj",
            ParamRole::MambaConvKernel => "mamba_conv_kernel",
            ParamRole::MambaConvBias => "mamba_conv_bias",
            ParamRole::MambaALog => "mamba_a_log",
            ParamRole::MambaDtW => "mamba_dt_w",
            ParamRole::MambaDtB => "mamba_dt_b",
            ParamRole::MambaDSkip => "mamba_d_skip",
            ParamRole::AttnQ => "attn_q",
            ParamRole::AttnK => "attn_k",
            ParamRole::AttnV => "attn_v",
            ParamRole::AttnO => "attn_o",
            ParamRole::MlpUp => "mlp_up",
            ParamRole::MlpGate => "mlp_gate",
            ParamRole::MlpDown => "mlp_down",
            ParamRole::SiteInProj => "site_in_proj",
            ParamRole::SiteOutProj => "site_out_proj",
            ParamRole::LoraA => "lora_a",
            ParamRole::LoraB => "lora_b",
        }
    }
}

impl Model {
    /// Walk every parameter tensor exactly once, in a fixed order. Shared
    /// blocks are visited once, not once per site, so the walk respects
    /// weight tying. Must stay in lockstep with [`Model::visit_params_mut`].
    pub fn visit_params(&self, mut f: impl FnMut(&str, ParamRole, &Tensor)) {
        f("embed", ParamRole::Embedding, &self.embed);
        for (i, (norm, blk)) in self.mamba_norms.iter().zip(&self.mamba).enumerate() {
            f(&format!("mamba.{i}.norm"), ParamRole::Norm, norm);
            f(&format!("mamba.{i}.in_proj"), ParamRole::MambaInProj, &blk.in_proj);
            f(&format!("mamba.{i}.conv_kernel"), ParamRole::MambaConvKernel, &blk.conv_kernel);
            f(&format!("mamba.{i}.conv_bias"), ParamRole::MambaConvBias, &blk.conv_bias);
            f(&format!("mamba.{i}.a_log"), ParamRole::MambaALog, &blk.a_log);
            f(&format!("mamba.{i}.dt_w"), ParamRole::MambaDtW, &blk.dt_w);
            f(&format!("mamba.{i}.dt_b"), ParamRole::MambaDtB, &blk.dt_b);
            f(&format!("mamba.{i}.d_skip"), ParamRole::MambaDSkip, &blk.d_skip);
            f(&format!("mamba.{i}.norm_w"), ParamRole::Norm, &blk.norm_w);
            f(&format!("mamba.{i}.out_proj"), ParamRole::MambaOutProj, &blk.out_proj);
        }
        for (i, b) in self.shared.iter().enumerate() {
            f(&format!("shared.{i}.attn_norm"), ParamRole::Norm, &b.attn_norm_w);
            f(&format!("shared.{i}.wq"), ParamRole::AttnQ, &b.wq);
            f(&format!("shared.{i}.wk"), ParamRole::AttnK, &b.wk);
            f(&format!("shared.{i}.wv"), ParamRole::AttnV, &b.wv);
            f(&format!("shared.{i}.wo"), ParamRole::AttnO, &b.wo);
            f(&format!("shared.{i}.mlp_norm"), ParamRole::Norm, &b.mlp_norm_w);
            f(&format!("shared.{i}.w_up"), ParamRole::MlpUp, &b.w_up);
            f(&format!("shared.{i}.w_gate"), ParamRole::MlpGate, &b.w_gate);
            f(&format!("shared.{i}.w_down"), ParamRole::MlpDown, &b.w_down);
        }
        for (i, s) in self.sites.iter().enumerate() {
            f(&format!("site.{i}.in_proj"), ParamRole::SiteInProj, &s.in_proj);
            f(&format!("site.{i}.out_proj"), ParamRole::SiteOutProj, &s.out_proj);
            for ad in &s.loras.adapters {
                f(&format!("site.{i}.lora.{}.a", ad.target.name()), ParamRole::LoraA, &ad.a);
                f(&format!("site.{i}.lora.{}.b", ad.target.name()), ParamRole::LoraB, &ad.b);
            }
        }
        f("final_norm", ParamRole::Norm, &self.final_norm_w);
        f("unembed", ParamRole::Unembedding, &self.unembed);
    }

    /// Mutable twin of [`Model::visit_params`]; identical names and order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, ParamRole, &mut Tensor)) {
        f("embed", ParamRole::Embedding, &mut self.embed);
        for (i, (norm, blk)) in self.mamba_norms.iter_mut().zip(&mut self.mamba).enumerate() {
            f(&format!("mamba.{i}.norm"), ParamRole::Norm, norm);
            f(&format!("mamba.{i}.in_proj"), ParamRole::MambaInProj, &mut blk.in_proj);
            f(&format!("mamba.{i}.conv_kernel"), ParamRole::MambaConvKernel, &mut blk.conv_kernel);
            f(&format!("mamba.{i}.conv_bias"), ParamRole::MambaConvBias, &mut blk.conv_bias);
            f(&format!("mamba.{i}.a_log"), ParamRole::MambaALog, &mut blk.a_log);
            f(&format!("mamba.{i}.dt_w"), ParamRole::MambaDtW, &mut blk.dt_w);
            f(&format!("mamba.{i}.dt_b"), ParamRole::MambaDtB, &mut blk.dt_b);
            f(&format!("mamba.{i}.d_skip"), ParamRole::MambaDSkip, &mut blk.d_skip);
            f(&format!("mamba.{i}.norm_w"), ParamRole::Norm, &mut blk.norm_w);
            f(&format!("mamba.{i}.out_proj"), ParamRole::MambaOutProj, &mut blk.out_proj);
        }
        for (i, b) in self.shared.iter_mut().enumerate() {
            f(&format!("shared.{i}.attn_norm"), ParamRole::Norm, &mut b.attn_norm_w);
            f(&format!("shared.{i}.wq"), ParamRole::AttnQ, &mut b.wq);
            f(&format!("shared.{i}.wk"), ParamRole::AttnK, &mut b.wk);
            f(&format!("shared.{i}.wv"), ParamRole::AttnV, &mut b.wv);
            f(&format!("shared.{i}.wo"), ParamRole::AttnO, &mut b.wo);
            f(&format!("shared.{i}.mlp_norm"), ParamRole::Norm, &mut b.mlp_norm_w);
            f(&format!("shared.{i}.w_up"), ParamRole::MlpUp, &mut b.w_up);
            f(&format!("shared.{i}.w_gate"), ParamRole::MlpGate, &mut b.w_gate);
            f(&format!("shared.{i}.w_down"), ParamRole::MlpDown, &mut b.w_down);
        }
        for (i, s) in self.sites.iter_mut().enumerate() {
            f(&format!("site.{i}.in_proj"), ParamRole::SiteInProj, &mut s.in_proj);
            f(&format!("site.{i}.out_proj"), ParamRole::SiteOutProj, &mut s.out_proj);
            for ad in &mut s.loras.adapters {
                f(&format!("site.{i}.lora.{}.a", ad.target.name()), ParamRole::LoraA, &mut ad.a);
                f(&format!("site.{i}.lora.{}.b", ad.target.name()), ParamRole::LoraB, &mut ad.b);
            }
        }
        f("final_norm", ParamRole::Norm, &mut self.final_norm_w);
        f("unembed", ParamRole::Unembedding, &mut self.unembed);
    }
}

// ─── analytic cache accounting ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheBytes {
    /// KV bytes of the hybrid at the given context length.
    pub kv_bytes: usize,
    /// SSM state bytes — independent of context length.
    pub ssm_state_bytes: usize,
    pub total: usize,
    /// KV bytes of a layer-count-matched pure transformer
    /// (`n_mamba_layers + n_sites` attention layers).
    pub pure_transformer_kv_bytes: usize,
    /// Pure/hybrid KV ratio with the layer-matched baseline:
    /// `(n_mamba + n_sites) / n_sites`.
    pub ratio_layer_matched: f64,
    /// Pure/hybrid KV ratio under the invocation-count convention:
    /// `n_mamba / n_sites` (= `attn_every` when it divides the layer count).
    pub ratio_site_convention: f64,
}

/// Closed-form cache memory model for a config at a context length.
pub fn analytic_cache_bytes(config: &ModelConfig, ctx_len: usize, dtype_bytes: usize) -> CacheBytes {
    let n_sites = config.n_sites();
    let entry = config.attn_heads * config.attn_head_dim * 2 * dtype_bytes;
    let kv_bytes = n_sites * ctx_len * entry;
    let dims = config.ssm_dims();
    let state_elems =
        dims.n_heads * dims.d_head * dims.d_state + (dims.conv_width - 1) * dims.conv_channels();
    let ssm_state_bytes = config.n_mamba_layers * state_elems * dtype_bytes;
    let pure_layers = config.n_mamba_layers + n_sites;
    let pure_transformer_kv_bytes = pure_layers * ctx_len * entry;
    let (ratio_layer_matched, ratio_site_convention) = if n_sites == 0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (pure_layers as f64 / n_sites as f64, config.n_mamba_layers as f64 / n_sites as f64)
    };
    CacheBytes {
        kv_bytes,
        ssm_state_bytes,
        total: kv_bytes + ssm_state_bytes,
        pure_transformer_kv_bytes,
        ratio_layer_matched,
        ratio_site_convention,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::InferenceCaches;
    use crate::numerics::grad_check;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_mamba_layers: 2,
            attn_every: 1,
            n_shared_blocks: 2,
            rotary: RotaryConfig { d_emb: 8, ..Default::default() },
            lora_attention: true,
            lora_mlp: true,
            lora_rank: 2,
            lora_alpha: 4.0,
            ssm_expand: 2,
            ssm_heads: 2,
            ssm_state: 4,
            ssm_conv_width: 3,
            attn_heads: 2,
            attn_head_dim: 8,
            mlp_expansion: 2,
            max_seq_len: 128,
            dtype: Dtype::F64,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let m1 = build_model(tiny_config(), 42).unwrap();
        let m2 = build_model(tiny_config(), 42).unwrap();
        let mut all_equal = true;
        let mut tensors2 = Vec::new();
        m2.visit_params(|name, _, t| tensors2.push((name.to_string(), t.data().to_vec())));
        let mut i = 0;
        m1.visit_params(|name, _, t| {
            let (n2, d2) = &tensors2[i];
            all_equal &= name == n2 && t.data() == d2.as_slice();
            i += 1;
        });
        assert!(all_equal && i == tensors2.len());
        let m3 = build_model(tiny_config(), 43).unwrap();
        let mut any_diff = false;
        let mut j = 0;
        m3.visit_params(|_, _, t| {
            any_diff |= t.data() != tensors2[j].1.as_slice();
            j += 1;
        });
        assert!(any_diff, "different seeds must differ");
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = tiny_config();
        let m = build_model(cfg.clone(), 1).unwrap();
        // independent closed-form count
        let d = cfg.d_model;
        let d_inner = cfg.ssm_expand * d;
        let hn = cfg.ssm_heads * cfg.ssm_state;
        let conv_ch = d_inner + 2 * hn;
        let per_mamba = d // norm
            + (2 * d_inner + 2 * hn) * d // in_proj
            + cfg.ssm_conv_width * conv_ch + conv_ch // conv kernel+bias
            + cfg.ssm_heads // a_log
            + cfg.ssm_heads * d + cfg.ssm_heads // dt_w, dt_b
            + cfg.ssm_heads // d_skip
            + d_inner // gated norm
            + d * d_inner; // out_proj
        let aw = cfg.attn_width();
        let mw = cfg.mlp_width();
        let per_shared = d + 3 * aw * d + d * aw + d + 2 * mw * d + d * mw;
        let n_sites = cfg.n_sites();
        let lora_params: usize = {
            let attn: usize = 3 * (cfg.lora_rank * d + aw * cfg.lora_rank)
                + (cfg.lora_rank * aw + d * cfg.lora_rank);
            let mlp: usize = 2 * (cfg.lora_rank * d + mw * cfg.lora_rank)
                + (cfg.lora_rank * mw + d * cfg.lora_rank);
            attn + mlp
        };
        let per_site = d * 2 * d + d * d + lora_params;
        let want = cfg.vocab_size * d // embed
            + cfg.n_mamba_layers * per_mamba
            + cfg.n_shared_blocks * per_shared
            + n_sites * per_site
            + d // final norm
            + cfg.vocab_size * d; // unembed
        assert_eq!(m.num_params(), want);
    }

    #[test]
    fn site_layout_and_alternation() {
        let cfg = ModelConfig { n_mamba_layers: 12, attn_every: 6, ..ModelConfig::default() };
        let m = build_model(cfg, 0).unwrap();
        assert_eq!(m.sites.len(), 2);
        assert_eq!(m.sites[0].after_layer, 6);
        assert_eq!(m.sites[1].after_layer, 12);
        assert_eq!(m.sites[0].block_idx, 0);
        assert_eq!(m.sites[1].block_idx, 1);

        let single = build_model(
            ModelConfig { n_shared_blocks: 1, ..VariantPreset::Tiny1p2bStyle.config() },
            0,
        )
        .unwrap();
        assert!(single.sites.iter().all(|s| s.block_idx == 0));
    }

    #[test]
    fn presets_have_their_structural_flags() {
        let p12 = preset("tiny-1p2b-style").unwrap();
        assert_eq!(p12.n_shared_blocks, 1);
        assert!(p12.lora_attention && p12.lora_mlp);
        assert!(p12.rotary.enabled);
        let p27 = preset("tiny-2p7b-style").unwrap();
        assert!(!p27.rotary.enabled);
        assert_eq!(p27.n_shared_blocks, 2);
        let p7 = preset("tiny-7b-style").unwrap();
        assert!(p7.rotary.enabled);
        assert_eq!(p7.n_shared_blocks, 2);
        assert!(!p7.lora_attention && p7.lora_mlp);
        for v in VariantPreset::ALL {
            build_model(v.config(), 7).unwrap();
        }
        assert!(preset("tiny-70b-style").is_err());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cfg = ModelConfig { n_shared_blocks: 3, ..tiny_config() };
        match build_model(cfg, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "n_shared_blocks"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = ModelConfig { attn_every: 0, ..tiny_config() };
        assert!(matches!(build_model(cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn zero_site_model_still_runs() {
        let cfg = ModelConfig { attn_every: 10, n_mamba_layers: 2, ..tiny_config() };
        let m = build_model(cfg, 3).unwrap();
        assert!(m.sites.is_empty());
        let mut tape = Tape::inference();
        let logits = m.forward(&mut tape, &[1, 2, 3], ExecMode::Parallel, None).unwrap();
        assert_eq!(logits.shape(), &[3, 32]);
        assert!(logits.is_finite());
    }

    #[test]
    fn parallel_equals_recurrent_end_to_end() {
        for (dtype, tol) in [(Dtype::F64, 1e-9), (Dtype::F32, 1e-4)] {
            let cfg = ModelConfig { dtype, ..tiny_config() };
            let m = build_model(cfg, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            let tokens: Vec<u32> = (0..20).map(|_| rng.gen_range(0..32)).collect();
            let mut tape = Tape::inference();
            let par = m.forward(&mut tape, &tokens, ExecMode::Parallel, None).unwrap();

            let mut caches = InferenceCaches::new(&m);
            let mut rec = Vec::new();
            for &t in &tokens {
                let l = m
                    .forward(&mut tape, &[t], ExecMode::Recurrent, Some(&mut caches))
                    .unwrap();
                rec.extend_from_slice(l.data());
            }
            let max = par
                .data()
                .iter()
                .zip(&rec)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(max < tol, "{dtype:?} mode equivalence: max dev {max}");
        }
    }

    #[test]
    fn end_to_end_causality_is_exact_in_f64() {
        let m = build_model(tiny_config(), 11).unwrap();
        let mut tape = Tape::inference();
        let base: Vec<u32> = vec![5, 9, 13, 2, 7, 21];
        let full = m.forward(&mut tape, &base, ExecMode::Parallel, None).unwrap();
        for t in 1..base.len() {
            let mut mutated = base.clone();
            mutated[t] = (mutated[t] + 11) % 32;
            let out = m.forward(&mut tape, &mutated, ExecMode::Parallel, None).unwrap();
            let v = 32;
            assert_eq!(
                &out.data()[..t * v],
                &full.data()[..t * v],
                "changing token {t} altered earlier logits"
            );
        }
    }

    #[test]
    fn gradcheck_mean_cross_entropy_tiny_model() {
        let m = build_model(tiny_config(), 13).unwrap();
        let tokens: Vec<u32> = vec![1, 4, 9, 16, 25];
        let targets: Vec<u32> = vec![4, 9, 16, 25, 5];
        // gradient w.r.t. a couple of representative parameters
        let err = grad_check(
            |tape, v| {
                let mut m2 = m.clone();
                m2.mamba[0].dt_w = v.clone();
                let logits = m2.forward(tape, &tokens, ExecMode::Parallel, None)?;
                tape.cross_entropy_mean(&logits, &targets, None)
            },
            &m.mamba[0].dt_w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "dt_w end-to-end grad err {err}");
        let err = grad_check(
            |tape, v| {
                let mut m2 = m.clone();
                m2.shared[0].wq = v.clone();
                let logits = m2.forward(tape, &tokens, ExecMode::Parallel, None)?;
                tape.cross_entropy_mean(&logits, &targets, None)
            },
            &m.shared[0].wq,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "wq end-to-end grad err {err}");
    }

    #[test]
    fn analytic_cache_bytes_formulas() {
        let cfg = ModelConfig { n_mamba_layers: 12, attn_every: 6, ..ModelConfig::default() };
        let cb = analytic_cache_bytes(&cfg, 1000, 4);
        assert_eq!(cb.kv_bytes, 2 * 1000 * 4 * 32 * 2 * 4);
        assert_eq!(cb.pure_transformer_kv_bytes, 14 * 1000 * 4 * 32 * 2 * 4);
        assert_eq!(cb.ratio_layer_matched, 7.0);
        assert_eq!(cb.ratio_site_convention, 6.0);
        let zero = analytic_cache_bytes(&cfg, 0, 4);
        assert_eq!(zero.kv_bytes, 0);
        assert_eq!(zero.ssm_state_bytes, cb.ssm_state_bytes);
        let huge = analytic_cache_bytes(&cfg, 1_000_000, 4);
        assert_eq!(huge.ssm_state_bytes, cb.ssm_state_bytes);
    }

    #[test]
    fn rotary_permutation_probe() {
        // With rotary off, a single attention invocation over embeddings is
        // invariant under permutation of earlier positions; with rotary on it
        // is not. (This is the zero-Mamba single-site model reduced to its
        // essential computation.)
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let block = SharedBlockParams::init(16, 2, 8, 32, Dtype::F64, 1.0, &mut rng);
        let loras = LoraSet::default();
        let x = init::randn(&mut rng, vec![6, 16], 1.0, Dtype::F64);
        let mut permuted = x.data().to_vec();
        for c in 0..16 {
            permuted.swap(c, 2 * 16 + c); // swap rows 0 and 2
        }
        let xp = Tensor::from_vec(vec![6, 16], Dtype::F64, permuted).unwrap();
        let positions: Vec<usize> = (0..6).collect();
        let mut tape = Tape::inference();

        let last = |t: &Tensor| t.data()[5 * 16..].to_vec();
        let y1 = shared_block_forward(&mut tape, &x, &block, &[&loras], None, None, &positions).unwrap();
        let y2 = shared_block_forward(&mut tape, &xp, &block, &[&loras], None, None, &positions).unwrap();
        let d_off: f64 = last(&y1)
            .iter()
            .zip(last(&y2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d_off < 1e-9, "rotary-off attention not permutation invariant: {d_off}");

        let cfg = RotaryConfig { d_emb: 8, ..Default::default() };
        let theta = effective_angles(&cfg).unwrap().unwrap();
        let y1 = shared_block_forward(&mut tape, &x, &block, &[&loras], Some(&theta), None, &positions)
            .unwrap();
        let y2 = shared_block_forward(&mut tape, &xp, &block, &[&loras], Some(&theta), None, &positions)
            .unwrap();
        let d_on: f64 = last(&y1)
            .iter()
            .zip(last(&y2))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d_on > 1e-6, "rotary-on attention unexpectedly permutation invariant");
    }
}
