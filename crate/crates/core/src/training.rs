//! Two-phase training: cosine phase-1 schedule, annealing with a re-warm to
//! the midpoint of the phase-1 learning rates, replay mixing between the
//! phase-1 and annealing streams, Adam with global-norm gradient clipping and
//! decoupled weight decay, and a context-length doubling curriculum.
//!
//! Training is fully resumable: checkpoints carry the model, the optimizer
//! moments, the mixer draw count, and both stream positions, so a resumed run
//! reproduces the uninterrupted loss trace bit for bit.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    decode_tensor_record, encode_tensor_record, save_model, write_atomic, Reader,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Dtype, Tape, Tensor};

// ─── learning-rate schedule ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// How the annealing re-warm peak is chosen. The default re-warms to the
/// arithmetic midpoint of the phase-1 maximum and minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RewarmRule {
    Midpoint,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub rewarm_rule: RewarmRule,
    pub lr_final: f64,
    pub rewarm_steps: usize,
    pub total_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub phase1: PhaseConfig,
    pub anneal: AnnealConfig,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phase1.warmup_steps >= self.phase1.total_steps {
            return Err(Error::config("schedule.phase1.warmup_steps", "must be < total_steps"));
        }
        if self.anneal.rewarm_steps >= self.anneal.total_steps {
            return Err(Error::config("schedule.anneal.rewarm_steps", "must be < total_steps"));
        }
        if self.phase1.lr_max < self.phase1.lr_min || self.phase1.lr_min < 0.0 {
            return Err(Error::config("schedule.phase1", "need lr_max >= lr_min >= 0"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.phase1.total_steps + self.anneal.total_steps
    }

    pub fn anneal_peak(&self) -> f64 {
        match self.anneal.rewarm_rule {
            RewarmRule::Midpoint => (self.phase1.lr_max + self.phase1.lr_min) / 2.0,
            RewarmRule::Fixed(v) => v,
        }
    }
}

/// Half-cosine interpolation hitting both endpoints exactly.
fn cosine_interp(from: f64, to: f64, num: usize, den: usize) -> f64 {
    if num == 0 {
        return from;
    }
    if num >= den {
        return to;
    }
    let u = num as f64 / den as f64;
    from + (to - from) * 0.5 * (1.0 - (std::f64::consts::PI * u).cos())
}

/// Learning rate at a global step: linear warmup, cosine decay to `lr_min`,
/// cosine re-warm to the anneal peak, cosine decay to `lr_final`, then
/// clamped at `lr_final`.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> f64 {
    let p1 = &cfg.phase1;
    if step < p1.warmup_steps {
        return p1.lr_max * step as f64 / p1.warmup_steps as f64;
    }
    if step <= p1.total_steps {
        return cosine_interp(p1.lr_max, p1.lr_min, step - p1.warmup_steps, p1.total_steps - p1.warmup_steps);
    }
    let a = &cfg.anneal;
    let s = step - p1.total_steps;
    let peak = cfg.anneal_peak();
    if s <= a.rewarm_steps {
        return cosine_interp(p1.lr_min, peak, s, a.rewarm_steps);
    }
    if s <= a.total_steps {
        return cosine_interp(peak, a.lr_final, s - a.rewarm_steps, a.total_steps - a.rewarm_steps);
    }
    a.lr_final
}

// ─── replay mixing ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Phase1,
    Anneal,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Phase1 => "phase1",
            Provenance::Anneal => "anneal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    /// Probability a batch is drawn from the phase-1 stream.
    pub replay_fraction: f64,
    pub seed: u64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig { replay_fraction: 0.6, seed: 0 }
    }
}

/// Seeded source selector plus stream positions with epoch accounting. The
/// phase-1 and anneal streams cycle independently; wrapping a stream
/// increments its epoch counter.
#[derive(Debug, Clone)]
pub struct ReplayMixer {
    rng: ChaCha8Rng,
    fraction: f64,
    pub draws: u64,
    pub phase1_pos: usize,
    pub anneal_pos: usize,
    pub phase1_epochs: usize,
    pub anneal_epochs: usize,
}

impl ReplayMixer {
    pub fn new(cfg: &MixerConfig) -> Result<ReplayMixer> {
        if !(0.0..=1.0).contains(&cfg.replay_fraction) {
            return Err(Error::config("mixer.replay_fraction", "must be in [0,1]"));
        }
        Ok(ReplayMixer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            fraction: cfg.replay_fraction,
            draws: 0,
            phase1_pos: 0,
            anneal_pos: 0,
            phase1_epochs: 0,
            anneal_epochs: 0,
        })
    }

    /// Rebuild mixer state from a checkpoint by replaying the seeded draws.
    pub fn replay(cfg: &MixerConfig, draws: u64, positions: (usize, usize, usize, usize)) -> Result<ReplayMixer> {
        let mut m = ReplayMixer::new(cfg)?;
        for _ in 0..draws {
            let _ = m.rng.gen::<f64>();
        }
        m.draws = draws;
        m.phase1_pos = positions.0;
        m.anneal_pos = positions.1;
        m.phase1_epochs = positions.2;
        m.anneal_epochs = positions.3;
        Ok(m)
    }

    pub fn next_source(&mut self) -> Provenance {
        self.draws += 1;
        if self.rng.gen::<f64>() < self.fraction {
            Provenance::Phase1
        } else {
            Provenance::Anneal
        }
    }

    /// Take the next sequence from the given stream, cycling with epoch
    /// accounting.
    pub fn take<'a>(&mut self, source: Provenance, phase1: &'a [Vec<u32>], anneal: &'a [Vec<u32>]) -> &'a Vec<u32> {
        match source {
            Provenance::Phase1 => {
                let item = &phase1[self.phase1_pos];
                self.phase1_pos += 1;
                if self.phase1_pos == phase1.len() {
                    self.phase1_pos = 0;
                    self.phase1_epochs += 1;
                }
                item
            }
            Provenance::Anneal => {
                let item = &anneal[self.anneal_pos];
                self.anneal_pos += 1;
                if self.anneal_pos == anneal.len() {
                    self.anneal_pos = 0;
                    self.anneal_epochs += 1;
                }
                item
            }
        }
    }
}

/// Draw a provenance-tagged batch stream from two finite streams.
pub fn replay_mix<'a>(
    phase1: &'a [Vec<u32>],
    anneal: &'a [Vec<u32>],
    cfg: &MixerConfig,
    n_draws: usize,
) -> Result<Vec<(Provenance, &'a Vec<u32>)>> {
    if phase1.is_empty() || anneal.is_empty() {
        return Err(Error::Input("replay_mix requires non-empty streams".into()));
    }
    let mut mixer = ReplayMixer::new(cfg)?;
    Ok((0..n_draws)
        .map(|_| {
            let src = mixer.next_source();
            (src, mixer.take(src, phase1, anneal))
        })
        .collect())
}

// ─── curriculum ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub start_len: usize,
    pub target_len: usize,
    /// Double the context length every this many steps.
    pub double_every: usize,
}

/// Sequence length at a step: `min(start · 2^(step / double_every), target)`.
pub fn curriculum_len(step: usize, cfg: &CurriculumConfig) -> usize {
    let doublings = (step / cfg.double_every.max(1)) as u32;
    let len = if doublings >= 63 {
        cfg.target_len
    } else {
        cfg.start_len.saturating_mul(1usize << doublings)
    };
    len.min(cfg.target_len)
}

// ─── optimizer ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1, clip_norm: 1.0 }
    }
}

/// Adam moments keyed by parameter name. The registry walks each tied tensor
/// exactly once, so shared parameters get exactly one moment pair and one
/// update from their summed gradient.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper) -> OptimizerState {
        OptimizerState { hyper, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn moment_count(&self) -> usize {
        self.m.len()
    }
}

/// One training batch: token sequences, with an optional per-target loss
/// mask (aligned with `sequence[1..]`).
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<Vec<u32>>,
    pub loss_mask: Option<Vec<Vec<bool>>>,
}

impl Batch {
    pub fn from_sequences(sequences: Vec<Vec<u32>>) -> Batch {
        Batch { sequences, loss_mask: None }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub post_clip_norm: f64,
}

/// One optimizer step: next-token cross-entropy over the batch, global-norm
/// clip, Adam with decoupled weight decay (2-d+ tensors only). Tied
/// parameters receive the sum of their per-site gradients in a single update.
pub fn train_step(model: &mut Model, batch: &Batch, opt: &mut OptimizerState, lr: f64) -> Result<StepStats> {
    if lr < 0.0 {
        return Err(Error::contract("negative learning rate"));
    }
    let mut tape = Tape::recording();
    let mut loss_acc: Option<Tensor> = None;
    let mut total_targets = 0usize;
    let mut per_seq = Vec::new();
    for (i, seq) in batch.sequences.iter().enumerate() {
        if seq.len() < 2 {
            return Err(Error::Input(format!("sequence {i} too short to form targets")));
        }
        let inputs = &seq[..seq.len() - 1];
        let targets = &seq[1..];
        let mask = batch.loss_mask.as_ref().map(|m| m[i].as_slice());
        if let Some(m) = mask {
            if m.len() != targets.len() {
                return Err(Error::shape(format!("loss mask {i}: {} entries for {} targets", m.len(), targets.len())));
            }
        }
        let n = mask.map_or(targets.len(), |m| m.iter().filter(|&&b| b).count());
        let logits = model.forward(&mut tape, inputs, crate::ssm::ExecMode::Parallel, None)?;
        let ce = tape.cross_entropy_mean(&logits, targets, mask)?;
        total_targets += n;
        per_seq.push((ce, n));
    }
    // token-weighted mean over the batch
    for (ce, n) in per_seq {
        let scaled = tape.scale(&ce, n as f64 / total_targets as f64)?;
        loss_acc = Some(match loss_acc {
            Some(acc) => tape.add(&acc, &scaled)?,
            None => scaled,
        });
    }
    let loss = loss_acc.expect("non-empty batch");
    let loss_val = loss.data()[0];
    if !loss_val.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {loss_val} at optimizer step {}",
            opt.step + 1
        )));
    }

    let mut grads = tape.backward(&loss)?;
    let grad_norm = grads.global_norm();
    let clip = opt.hyper.clip_norm;
    let scale = if grad_norm > clip { clip / grad_norm } else { 1.0 };
    if scale < 1.0 {
        grads.scale_all(scale);
    }
    let post_clip_norm = grad_norm * scale;

    opt.step += 1;
    let t = opt.step;
    let h = opt.hyper;
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    model.visit_params_mut(|name, _, p| {
        let Some(g) = grads.get(p) else { return };
        let m = opt.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = opt.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let decay = if p.shape().len() >= 2 { h.weight_decay } else { 0.0 };
        let dtype = p.dtype();
        let data = p.data_mut();
        for i in 0..g.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let update = lr * (m_hat / (v_hat.sqrt() + h.eps) + decay * data[i]);
            data[i] = dtype.round(data[i] - update);
        }
    });

    Ok(StepStats { loss: loss_val, grad_norm, post_clip_norm })
}

// ─── training runs ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub schedule: ScheduleConfig,
    pub mixer: MixerConfig,
    #[serde(default)]
    pub curriculum: Option<CurriculumConfig>,
    pub adam: AdamHyper,
    pub batch_size: usize,
    /// Steps between checkpoints; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainData {
    pub phase1: Vec<Vec<u32>>,
    pub anneal: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seq_len: usize,
    pub provenance: &'static str,
    pub grad_norm: f64,
}

/// FNV-1a over bytes; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Fingerprint of everything resume must agree on: plan and model config.
pub fn config_fingerprint(model: &Model, plan: &TrainPlan) -> u64 {
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    let plan_bytes = serde_json::to_vec(plan).expect("plan serializes");
    fnv1a(&[cfg, plan_bytes].concat())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerProgress {
    pub step: usize,
    pub mixer_draws: u64,
    pub phase1_pos: usize,
    pub anneal_pos: usize,
    pub phase1_epochs: usize,
    pub anneal_epochs: usize,
    pub fingerprint: u64,
}

const STATE_MAGIC: &[u8; 8] = b"TZTRST01";

pub fn save_trainer_state(path: &Path, opt: &OptimizerState, progress: &TrainerProgress) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    let header = serde_json::json!({
        "progress": progress,
        "hyper": opt.hyper,
        "opt_step": opt.step,
    });
    let hb = header.to_string().into_bytes();
    out.extend_from_slice(&(hb.len() as u32).to_le_bytes());
    out.extend_from_slice(&hb);
    let mut names: Vec<&String> = opt.m.keys().collect();
    names.sort();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in names {
        let m = Tensor::from_vec(vec![opt.m[name].len()], Dtype::F64, opt.m[name].clone())?;
        let v = Tensor::from_vec(vec![opt.v[name].len()], Dtype::F64, opt.v[name].clone())?;
        encode_tensor_record(&mut out, &format!("m.{name}"), &m);
        encode_tensor_record(&mut out, &format!("v.{name}"), &v);
    }
    write_atomic(path, &out)
}

pub fn load_trainer_state(path: &Path) -> Result<(OptimizerState, TrainerProgress)> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    if r.take(8)? != STATE_MAGIC {
        return Err(Error::Checkpoint("not a trainer state file".into()));
    }
    let hlen = r.u32()?;
    let header: serde_json::Value = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("state header: {e}")))?;
    let progress: TrainerProgress = serde_json::from_value(header["progress"].clone())
        .map_err(|e| Error::Checkpoint(format!("state progress: {e}")))?;
    let hyper: AdamHyper = serde_json::from_value(header["hyper"].clone())
        .map_err(|e| Error::Checkpoint(format!("state hyper: {e}")))?;
    let opt_step = header["opt_step"].as_u64().unwrap_or(0);
    let count = r.u32()?;
    let mut opt = OptimizerState::new(hyper);
    opt.step = opt_step;
    for _ in 0..count {
        let (mname, mt) = decode_tensor_record(&mut r)?;
        let (vname, vt) = decode_tensor_record(&mut r)?;
        let name = mname
            .strip_prefix("m.")
            .ok_or_else(|| Error::Checkpoint(format!("unexpected record `{mname}`")))?;
        if vname != format!("v.{name}") {
            return Err(Error::Checkpoint(format!("mismatched moment pair {mname}/{vname}")));
        }
        opt.m.insert(name.to_string(), mt.data().to_vec());
        opt.v.insert(name.to_string(), vt.data().to_vec());
    }
    Ok((opt, progress))
}

/// Run (or continue) the two-phase protocol. Phase 1 consumes the phase-1
/// stream directly; the anneal phase draws each batch from the replay mixer.
/// Writes `metrics.jsonl`, `model.ckpt`, and `trainer_state.bin` under
/// `out_dir`.
pub fn run_training(
    model: &mut Model,
    plan: &TrainPlan,
    data: &TrainData,
    out_dir: &Path,
) -> Result<Vec<MetricsRecord>> {
    run_training_until(model, plan, data, out_dir, usize::MAX)
}

/// Like [`run_training`] but stops gracefully after `stop_after` steps,
/// checkpointing at the stop point so the run can be resumed.
pub fn run_training_until(
    model: &mut Model,
    plan: &TrainPlan,
    data: &TrainData,
    out_dir: &Path,
    stop_after: usize,
) -> Result<Vec<MetricsRecord>> {
    plan.schedule.validate()?;
    if data.phase1.is_empty() {
        return Err(Error::Input("empty phase-1 stream".into()));
    }
    if plan.schedule.anneal.total_steps > 0 && data.anneal.is_empty() {
        return Err(Error::Input("empty anneal stream with a non-empty anneal phase".into()));
    }
    let fingerprint = config_fingerprint(model, plan);
    let mut opt = OptimizerState::new(plan.adam);
    let mut mixer = ReplayMixer::new(&plan.mixer)?;
    let progress = TrainerProgress {
        step: 0,
        mixer_draws: 0,
        phase1_pos: 0,
        anneal_pos: 0,
        phase1_epochs: 0,
        anneal_epochs: 0,
        fingerprint,
    };
    train_loop(model, plan, data, out_dir, &mut opt, progress, &mut mixer, stop_after)
}

/// Resume from `out_dir` (model.ckpt + trainer_state.bin). Refuses to resume
/// when the stored fingerprint disagrees with the given plan and model.
pub fn resume_training(
    plan: &TrainPlan,
    data: &TrainData,
    out_dir: &Path,
) -> Result<(Model, Vec<MetricsRecord>)> {
    let mut model = crate::checkpoint::load_model(&out_dir.join("model.ckpt"))?;
    let (mut opt, progress) = load_trainer_state(&out_dir.join("trainer_state.bin"))?;
    if progress.fingerprint != config_fingerprint(&model, plan) {
        return Err(Error::Training(
            "refusing to resume: config fingerprint differs from checkpoint".into(),
        ));
    }
    let mut mixer = ReplayMixer::replay(
        &plan.mixer,
        progress.mixer_draws,
        (progress.phase1_pos, progress.anneal_pos, progress.phase1_epochs, progress.anneal_epochs),
    )?;
    let metrics =
        train_loop(&mut model, plan, data, out_dir, &mut opt, progress, &mut mixer, usize::MAX)?;
    Ok((model, metrics))
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    model: &mut Model,
    plan: &TrainPlan,
    data: &TrainData,
    out_dir: &Path,
    opt: &mut OptimizerState,
    mut progress: TrainerProgress,
    mixer: &mut ReplayMixer,
    stop_after: usize,
) -> Result<Vec<MetricsRecord>> {
    fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = fs::OpenOptions::new().create(true).append(true).open(&metrics_path)?;
    let mut records = Vec::new();
    let total = plan.schedule.total_steps().min(stop_after);
    let phase1_total = plan.schedule.phase1.total_steps;
    let batch_size = plan.batch_size.max(1);

    while progress.step < total {
        let step = progress.step;
        let lr = lr_at(step, &plan.schedule);
        let source = if step < phase1_total { Provenance::Phase1 } else { mixer.next_source() };
        let mut sequences = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            sequences.push(mixer.take(source, &data.phase1, &data.anneal).clone());
        }
        let seq_len = match &plan.curriculum {
            Some(c) => {
                let len = curriculum_len(step, c);
                for s in sequences.iter_mut() {
                    s.truncate(len + 1); // len targets
                }
                len
            }
            None => sequences.iter().map(|s| s.len() - 1).max().unwrap_or(0),
        };
        let batch = Batch::from_sequences(sequences);
        let stats = train_step(model, &batch, opt, lr)?;
        let record = MetricsRecord {
            step,
            loss: stats.loss,
            lr,
            seq_len,
            provenance: source.name(),
            grad_norm: stats.grad_norm,
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&record).expect("record serializes"))?;
        records.push(record);
        progress.step += 1;
        progress.mixer_draws = mixer.draws;
        progress.phase1_pos = mixer.phase1_pos;
        progress.anneal_pos = mixer.anneal_pos;
        progress.phase1_epochs = mixer.phase1_epochs;
        progress.anneal_epochs = mixer.anneal_epochs;

        let at_checkpoint =
            plan.checkpoint_every > 0 && progress.step % plan.checkpoint_every == 0;
        if at_checkpoint || progress.step == total {
            metrics_file.flush()?;
            save_model(&out_dir.join("model.ckpt"), model)?;
            save_trainer_state(&out_dir.join("trainer_state.bin"), opt, &progress)?;
        }
    }
    metrics_file.flush()?;
    Ok(records)
}
