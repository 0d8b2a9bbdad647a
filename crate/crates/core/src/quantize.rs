//! 4-bit block quantization with an SSM-aware precision policy, plus
//! QLoRA-style adapter finetuning on the frozen quantized base.
//!
//! Scheme: symmetric int4 with per-block absmax scaling. Codes live in
//! `[-7, 7]` (the -8 code is reserved to keep the grid symmetric), two per
//! byte; each block of `block_size` elements carries one scale stored at f16
//! precision. The policy keeps the SSM-sensitive parameters — the decay
//! parameter, the dt projection, the convolution — along with embeddings,
//! norms, and all runtime state in full precision; every other linear is
//! quantized.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{LoraAdapter, LoraSet, LoraTarget};
use crate::checkpoint::{decode_tensor_record, encode_tensor_record, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig, ParamRole};
use crate::numerics::{Dtype, Tensor};
use crate::training::{train_step, AdamHyper, Batch, OptimizerState};

const MAX_CODE: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantScheme {
    SymmetricInt4,
}

impl QuantScheme {
    fn tag(self) -> u8 {
        match self {
            QuantScheme::SymmetricInt4 => 0,
        }
    }

    fn from_tag(tag: u8) -> Option<QuantScheme> {
        match tag {
            0 => Some(QuantScheme::SymmetricInt4),
            _ => None,
        }
    }
}

/// A 4-bit block-quantized tensor: packed codes plus one f16 scale per block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    /// Two codes per byte; even element in the low nibble, stored as code+8.
    pub codes: Vec<u8>,
    /// Per-block scales, f16-representable values.
    pub scales: Vec<f64>,
    pub shape: Vec<usize>,
    pub block_size: usize,
    pub scheme: QuantScheme,
}

/// Per-block absmax symmetric quantization to int4.
pub fn quantize_tensor(w: &Tensor, block_size: usize) -> Result<QuantizedTensor> {
    if block_size < 1 {
        return Err(Error::contract("block_size must be >= 1"));
    }
    let data = w.data();
    let numel = data.len();
    let n_blocks = numel.div_ceil(block_size);
    let mut scales = Vec::with_capacity(n_blocks);
    let mut codes = vec![0u8; numel.div_ceil(2)];
    for b in 0..n_blocks {
        let lo = b * block_size;
        let hi = (lo + block_size).min(numel);
        let absmax = data[lo..hi].iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        let scale = Dtype::F16.round(absmax / MAX_CODE);
        scales.push(scale);
        for i in lo..hi {
            let code = if scale == 0.0 {
                0i8
            } else {
                (data[i] / scale).round().clamp(-MAX_CODE, MAX_CODE) as i8
            };
            let nibble = (code + 8) as u8;
            if i % 2 == 0 {
                codes[i / 2] |= nibble;
            } else {
                codes[i / 2] |= nibble << 4;
            }
        }
    }
    Ok(QuantizedTensor {
        codes,
        scales,
        shape: w.shape().to_vec(),
        block_size,
        scheme: QuantScheme::SymmetricInt4,
    })
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn code(&self, i: usize) -> i32 {
        let byte = self.codes[i / 2];
        let nibble = if i % 2 == 0 { byte & 0x0f } else { byte >> 4 };
        nibble as i32 - 8
    }

    pub fn dequantize(&self, dtype: Dtype) -> Tensor {
        let numel = self.numel();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let scale = self.scales[i / self.block_size];
            data.push(self.code(i) as f64 * scale);
        }
        dtype.round_slice(&mut data);
        Tensor::from_vec(self.shape.clone(), dtype, data).expect("shape matches by construction")
    }

    /// Serialized size: packed codes plus 2 bytes per block scale.
    pub fn bytes(&self) -> usize {
        self.codes.len() + self.scales.len() * 2
    }
}

// ─── precision policy ───────────────────────────────────────────────────────

impl ParamRole {
    pub const ALL: [ParamRole; 22] = [
        ParamRole::Embedding,
        ParamRole::Unembedding,
        ParamRole::Norm,
        ParamRole::MambaInProj,
        ParamRole::MambaOutProj,
        ParamRole::MambaConvKernel,
        ParamRole::MambaConvBias,
        ParamRole::MambaALog,
        ParamRole::MambaDtW,
        ParamRole::MambaDtB,
        ParamRole::MambaDSkip,
        ParamRole::AttnQ,
        ParamRole::AttnK,
        ParamRole::AttnV,
        ParamRole::AttnO,
        ParamRole::MlpUp,
        ParamRole::MlpGate,
        ParamRole::MlpDown,
        ParamRole::SiteInProj,
        ParamRole::SiteOutProj,
        ParamRole::LoraA,
        ParamRole::LoraB,
    ];
}

/// Which parameter roles get quantized and which stay at full precision. The
/// two sets must partition all roles; runtime states are never parameters and
/// so are never quantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPolicy {
    pub quantize: BTreeSet<ParamRole>,
    pub keep_high_precision: BTreeSet<ParamRole>,
}

impl PrecisionPolicy {
    /// The SSM-aware default: all linear projections quantized; embedding,
    /// unembedding, norms, the decay parameter, the dt projection, and the
    /// convolution kept in the training dtype.
    pub fn ssm_aware() -> PrecisionPolicy {
        let quantize = BTreeSet::from([
            ParamRole::MambaInProj,
            ParamRole::MambaOutProj,
            ParamRole::AttnQ,
            ParamRole::AttnK,
            ParamRole::AttnV,
            ParamRole::AttnO,
            ParamRole::MlpUp,
            ParamRole::MlpGate,
            ParamRole::MlpDown,
            ParamRole::SiteInProj,
            ParamRole::SiteOutProj,
            ParamRole::LoraA,
            ParamRole::LoraB,
        ]);
        let keep_high_precision =
            ParamRole::ALL.iter().copied().filter(|r| !quantize.contains(r)).collect();
        PrecisionPolicy { quantize, keep_high_precision }
    }

    pub fn validate(&self) -> Result<()> {
        for role in ParamRole::ALL {
            let q = self.quantize.contains(&role);
            let k = self.keep_high_precision.contains(&role);
            if q && k {
                return Err(Error::Policy(format!("role {} in both sets", role.name())));
            }
            if !q && !k {
                return Err(Error::Policy(format!("role {} not covered", role.name())));
            }
        }
        Ok(())
    }
}

// ─── quantized model ────────────────────────────────────────────────────────

/// A frozen model whose policy-selected weights are 4-bit quantized. The
/// runnable `model` holds the dequantized values (dequantize-on-use without
/// quantized kernels); `qtensors` is the source of truth for the quantized
/// representation and for footprint accounting.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub model: Model,
    pub qtensors: BTreeMap<String, QuantizedTensor>,
    pub policy: PrecisionPolicy,
    pub block_size: usize,
}

pub fn quantize_model(
    model: &Model,
    policy: &PrecisionPolicy,
    block_size: usize,
) -> Result<QuantizedModel> {
    policy.validate()?;
    let mut frozen = model.clone();
    let mut qtensors = BTreeMap::new();
    let mut err = None;
    let quantize_set = policy.quantize.clone();
    frozen.visit_params_mut(|name, role, t| {
        if quantize_set.contains(&role) {
            match quantize_tensor(t, block_size) {
                Ok(q) => {
                    *t = q.dequantize(t.dtype());
                    qtensors.insert(name.to_string(), q);
                }
                Err(e) => err = Some(e),
            }
        } else {
            // keep values, drop trainability: the base model is frozen
            *t = t.detached();
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(QuantizedModel { model: frozen, qtensors, policy: policy.clone(), block_size })
}

impl QuantizedModel {
    /// Stable fingerprint over all quantized code/scale buffers; used to
    /// verify the freeze contract after adapter training.
    pub fn codes_fingerprint(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut eat = |b: u8| {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        };
        for (name, q) in &self.qtensors {
            for &b in name.as_bytes() {
                eat(b);
            }
            for &b in &q.codes {
                eat(b);
            }
            for &s in &q.scales {
                for b in s.to_le_bytes() {
                    eat(b);
                }
            }
        }
        hash
    }

    /// Runnable model with extra adapter sets stacked onto each site.
    pub fn with_adapters(&self, adapters: &[LoraSet]) -> Result<Model> {
        if adapters.len() != self.model.sites.len() {
            return Err(Error::shape(format!(
                "{} adapter sets for {} sites",
                adapters.len(),
                self.model.sites.len()
            )));
        }
        let mut m = self.model.clone();
        for (site, extra) in m.sites.iter_mut().zip(adapters) {
            site.loras.adapters.extend(extra.adapters.iter().cloned());
        }
        Ok(m)
    }
}

// ─── footprint accounting ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Footprint {
    pub by_role: BTreeMap<String, usize>,
    pub total: usize,
}

/// Exact byte accounting of a full-precision model at its dtype widths.
pub fn footprint_model(model: &Model) -> Footprint {
    let mut by_role: BTreeMap<String, usize> = BTreeMap::new();
    model.visit_params(|_, role, t| {
        *by_role.entry(role.name().to_string()).or_default() += t.logical_bytes();
    });
    let total = by_role.values().sum();
    Footprint { by_role, total }
}

/// Exact byte accounting of a quantized model: quantized roles at packed-code
/// plus scale size, kept roles at their dtype width.
pub fn footprint_quantized(qm: &QuantizedModel) -> Footprint {
    let mut by_role: BTreeMap<String, usize> = BTreeMap::new();
    qm.model.visit_params(|name, role, t| {
        let bytes = match qm.qtensors.get(name) {
            Some(q) => q.bytes(),
            None => t.logical_bytes(),
        };
        *by_role.entry(role.name().to_string()).or_default() += bytes;
    });
    let total = by_role.values().sum();
    Footprint { by_role, total }
}

// ─── QLoRA finetuning ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct QloraOutcome {
    /// One trained adapter set per invocation site.
    pub adapters: Vec<LoraSet>,
    pub loss_trace: Vec<f64>,
}

/// Train fresh adapters on top of the frozen quantized base. Gradients flow
/// only into the adapters; the quantized codes are verified bit-identical
/// before and after.
#[allow(clippy::too_many_arguments)]
pub fn qlora_finetune(
    qm: &QuantizedModel,
    targets: &[LoraTarget],
    batches: &[Batch],
    steps: usize,
    lr: f64,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<QloraOutcome> {
    if batches.is_empty() {
        return Err(Error::Input("qlora_finetune needs at least one batch".into()));
    }
    let before = qm.codes_fingerprint();
    let cfg = &qm.model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh: Vec<LoraSet> = (0..qm.model.sites.len())
        .map(|_| {
            LoraSet::init(
                targets,
                cfg.d_model,
                cfg.attn_width(),
                cfg.mlp_width(),
                rank,
                alpha,
                cfg.dtype,
                &mut rng,
            )
        })
        .collect();
    let mut trainee = qm.with_adapters(&fresh)?;

    let mut opt = OptimizerState::new(AdamHyper { weight_decay: 0.0, ..AdamHyper::default() });
    let mut loss_trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = &batches[step % batches.len()];
        let stats = train_step(&mut trainee, batch, &mut opt, lr)?;
        loss_trace.push(stats.loss);
    }

    // extract the trained tail adapters from each site
    let adapters: Vec<LoraSet> = trainee
        .sites
        .iter()
        .map(|site| {
            let base_count = site.loras.adapters.len() - targets.len();
            LoraSet { adapters: site.loras.adapters[base_count..].to_vec() }
        })
        .collect();

    if qm.codes_fingerprint() != before {
        return Err(Error::Policy("quantized base weights mutated during finetuning".into()));
    }
    Ok(QloraOutcome { adapters, loss_trace })
}

// ─── adapter quantization ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct QuantizedAdapter {
    pub target: LoraTarget,
    pub a: QuantizedTensor,
    pub b: QuantizedTensor,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, Default)]
pub struct QuantizedAdapterSet {
    pub adapters: Vec<QuantizedAdapter>,
}

impl QuantizedAdapterSet {
    pub fn dequantize(&self, dtype: Dtype) -> LoraSet {
        LoraSet {
            adapters: self
                .adapters
                .iter()
                .map(|q| LoraAdapter {
                    target: q.target,
                    a: q.a.dequantize(dtype),
                    b: q.b.dequantize(dtype),
                    rank: q.rank,
                    alpha: q.alpha,
                })
                .collect(),
        }
    }

    pub fn bytes(&self) -> usize {
        self.adapters.iter().map(|q| q.a.bytes() + q.b.bytes()).sum()
    }
}

/// Quantize trained adapters with the same symmetric-int4 scheme.
pub fn quantize_adapters(sets: &[LoraSet], block_size: usize) -> Result<Vec<QuantizedAdapterSet>> {
    sets.iter()
        .map(|set| {
            let adapters = set
                .adapters
                .iter()
                .map(|ad| {
                    Ok(QuantizedAdapter {
                        target: ad.target,
                        a: quantize_tensor(&ad.a, block_size)?,
                        b: quantize_tensor(&ad.b, block_size)?,
                        rank: ad.rank,
                        alpha: ad.alpha,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QuantizedAdapterSet { adapters })
        })
        .collect()
}

// ─── quantized checkpoint ───────────────────────────────────────────────────

pub const QMAGIC: &[u8; 8] = b"TZQCKPT1";

/// Quantized checkpoint container. Extends the model checkpoint with a
/// policy header and per-tensor records tagged full (0) or quantized (1):
///
/// ```text
/// magic "TZQCKPT1" | cfg_len u32 | cfg JSON | hdr_len u32 | hdr JSON
/// count u32
/// record := kind u8
///   kind 0: full tensor record (model checkpoint layout)
///   kind 1: name_len u32 | name | scheme u8 | rank u8 | dims (rank × u32)
///           | block_size u32 | codes (ceil(numel/2) bytes)
///           | scales (n_blocks × u16 f16 bits)
/// ```
pub fn quantized_to_bytes(qm: &QuantizedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(QMAGIC);
    let cfg = serde_json::to_vec(&qm.model.config)
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let hdr = serde_json::json!({"policy": qm.policy, "block_size": qm.block_size}).to_string();
    out.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
    out.extend_from_slice(hdr.as_bytes());
    let mut count = 0;
    qm.model.visit_params(|_, _, _| count += 1);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    qm.model.visit_params(|name, _, t| match qm.qtensors.get(name) {
        Some(q) => {
            out.push(1);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(q.scheme.tag());
            out.push(q.shape.len() as u8);
            for &d in &q.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(q.block_size as u32).to_le_bytes());
            out.extend_from_slice(&q.codes);
            for &s in &q.scales {
                out.extend_from_slice(&half::f16::from_f64(s).to_le_bytes());
            }
        }
        None => {
            out.push(0);
            encode_tensor_record(&mut out, name, t);
        }
    });
    Ok(out)
}

pub fn save_quantized(path: &Path, qm: &QuantizedModel) -> Result<()> {
    write_atomic(path, &quantized_to_bytes(qm)?)
}

pub fn quantized_from_bytes(buf: &[u8]) -> Result<QuantizedModel> {
    let mut r = Reader::new(buf);
    if r.take(8)? != QMAGIC {
        return Err(Error::Checkpoint("bad magic; not a quantized checkpoint".into()));
    }
    let cfg_len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    let hdr_len = r.u32()?;
    let hdr: serde_json::Value = serde_json::from_slice(r.take(hdr_len)?)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    let policy: PrecisionPolicy = serde_json::from_value(hdr["policy"].clone())
        .map_err(|e| Error::Checkpoint(format!("policy decode: {e}")))?;
    let block_size = hdr["block_size"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("missing block_size".into()))? as usize;
    let count = r.u32()?;
    let mut full = std::collections::HashMap::new();
    let mut quant: BTreeMap<String, QuantizedTensor> = BTreeMap::new();
    for _ in 0..count {
        match r.u8()? {
            0 => {
                let (name, t) = decode_tensor_record(&mut r)?;
                full.insert(name, t);
            }
            1 => {
                let name_len = r.u32()?;
                let name = String::from_utf8(r.take(name_len)?.to_vec())
                    .map_err(|_| Error::Checkpoint("bad tensor name".into()))?;
                let scheme = QuantScheme::from_tag(r.u8()?)
                    .ok_or_else(|| Error::Checkpoint("unknown quant scheme".into()))?;
                let rank = r.u8()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u32()?);
                }
                let bs = r.u32()?;
                let numel: usize = shape.iter().product();
                let codes = r.take(numel.div_ceil(2))?.to_vec();
                let n_blocks = numel.div_ceil(bs);
                let scales = r
                    .take(n_blocks * 2)?
                    .chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
                    .collect();
                quant.insert(name, QuantizedTensor { codes, scales, shape, block_size: bs, scheme });
            }
            k => return Err(Error::Checkpoint(format!("unknown record kind {k}"))),
        }
    }
    if !r.is_done() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let mut model = build_model(config, 0)?;
    let mut problems = Vec::new();
    model.visit_params_mut(|name, _, t| {
        if let Some(q) = quant.get(name) {
            if q.shape == t.shape() {
                *t = q.dequantize(t.dtype());
            } else {
                problems.push(format!("{name}: quantized shape mismatch"));
            }
        } else if let Some(loaded) = full.remove(name) {
            if loaded.shape() == t.shape() && loaded.dtype() == t.dtype() {
                *t = loaded;
            } else {
                problems.push(format!("{name}: shape/dtype mismatch"));
            }
        } else {
            problems.push(format!("{name}: absent"));
        }
    });
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join(", ")));
    }
    Ok(QuantizedModel { model, qtensors: quant, policy, block_size })
}

pub fn load_quantized(path: &Path) -> Result<QuantizedModel> {
    quantized_from_bytes(&fs::read(path)?)
}

// ─── adapter files ──────────────────────────────────────────────────────────

const AMAGIC: &[u8; 8] = b"TZLORA01";

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    target: LoraTarget,
    rank: usize,
    alpha: f64,
}

/// Serialize per-site adapter sets: a JSON layout header, then one `a`/`b`
/// tensor record pair per adapter in order.
pub fn adapters_to_bytes(sets: &[LoraSet]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(AMAGIC);
    let layout: Vec<Vec<AdapterMeta>> = sets
        .iter()
        .map(|s| {
            s.adapters
                .iter()
                .map(|a| AdapterMeta { target: a.target, rank: a.rank, alpha: a.alpha })
                .collect()
        })
        .collect();
    let hdr = serde_json::to_vec(&layout).map_err(|e| Error::Checkpoint(format!("layout: {e}")))?;
    out.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
    out.extend_from_slice(&hdr);
    for (i, set) in sets.iter().enumerate() {
        for ad in &set.adapters {
            encode_tensor_record(&mut out, &format!("site.{i}.{}.a", ad.target.name()), &ad.a);
            encode_tensor_record(&mut out, &format!("site.{i}.{}.b", ad.target.name()), &ad.b);
        }
    }
    Ok(out)
}

pub fn adapters_from_bytes(buf: &[u8]) -> Result<Vec<LoraSet>> {
    let mut r = Reader::new(buf);
    if r.take(8)? != AMAGIC {
        return Err(Error::Checkpoint("not an adapter file".into()));
    }
    let hdr_len = r.u32()?;
    let layout: Vec<Vec<AdapterMeta>> = serde_json::from_slice(r.take(hdr_len)?)
        .map_err(|e| Error::Checkpoint(format!("layout: {e}")))?;
    let mut sets = Vec::with_capacity(layout.len());
    for metas in layout {
        let mut adapters = Vec::with_capacity(metas.len());
        for meta in metas {
            let (_, a) = decode_tensor_record(&mut r)?;
            let (_, b) = decode_tensor_record(&mut r)?;
            adapters.push(LoraAdapter {
                target: meta.target,
                a: a.requires_grad(true),
                b: b.requires_grad(true),
                rank: meta.rank,
                alpha: meta.alpha,
            });
        }
        sets.push(LoraSet { adapters });
    }
    if !r.is_done() {
        return Err(Error::Checkpoint("trailing bytes in adapter file".into()));
    }
    Ok(sets)
}

pub fn save_adapters(path: &Path, sets: &[LoraSet]) -> Result<()> {
    write_atomic(path, &adapters_to_bytes(sets)?)
}

pub fn load_adapters(path: &Path) -> Result<Vec<LoraSet>> {
    adapters_from_bytes(&fs::read(path)?)
}
