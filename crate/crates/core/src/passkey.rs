//! Passkey retrieval ("needle in a haystack") harness.
//!
//! A sample is `total_len` tokens of seeded filler text with the needle
//! sentence `"The pass key is <key>. "` planted at a depth-derived index and
//! a retrieval query at the end; the model (or a test stub) must continue
//! with the key digits, scored by exact match on the digits only. The harness
//! self-tests with an echo stub (always 100%) and a random stub (chance
//! level), independent of any trained model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{generate, Sampler};
use crate::model::Model;
use crate::tokenizer;
use crate::training::Batch;

const QUERY: &str = "What is the pass key? The pass key is ";

/// Seeded pseudo-random filler sentences; fixed list so accuracy numbers are
/// comparable across runs.
const FILLER_SENTENCES: &[&str] = &[
    "The grass is green here in the quiet valley. ",
    "Rain fell softly on the old tin roof all night. ",
    "A small boat drifted past the harbor wall at noon. ",
    "The baker set fresh loaves out before sunrise. ",
    "Wind moved through the pines above the ridge line. ",
    "The library stays open late on market days. ",
    "Two sparrows argued over crumbs by the fountain. ",
    "The train rolled north through fields of barley. ",
    "Lanterns glowed along the path to the shore. ",
    "The clockmaker oiled every gear twice over. ",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasskeySpec {
    /// Sequence length in tokens within which the needle is embedded.
    pub total_len: usize,
    /// Insertion depth in `[0, 100]`.
    pub depth_percent: f64,
    /// The digit string to retrieve.
    pub key: String,
    pub filler_seed: u64,
}

#[derive(Debug, Clone)]
pub struct PasskeySample {
    pub tokens: Vec<u32>,
    pub answer: String,
    /// Token span `[start, end)` occupied by the needle sentence.
    pub needle_span: (usize, usize),
}

fn needle_text(key: &str) -> String {
    format!("The pass key is {key}. ")
}

/// Depth-derived needle start: `depth/100 · (total - needle)`, clamped so the
/// needle plus query still fit.
pub(crate) fn needle_start(
    total_len: usize,
    needle_len: usize,
    query_len: usize,
    depth_percent: f64,
) -> usize {
    let raw = (depth_percent / 100.0 * (total_len - needle_len) as f64).round();
    let max_start = total_len - needle_len - query_len;
    (raw.max(0.0) as usize).min(max_start)
}

/// Build a passkey sample: filler with the needle planted at the
/// depth-derived index, query at the end, exactly `total_len` tokens.
pub fn passkey_make(spec: &PasskeySpec) -> Result<PasskeySample> {
    if spec.key.is_empty() || !spec.key.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Input(format!("key must be a non-empty digit string, got `{}`", spec.key)));
    }
    if !(0.0..=100.0).contains(&spec.depth_percent) {
        return Err(Error::Input(format!("depth_percent {} outside [0, 100]", spec.depth_percent)));
    }
    let needle = tokenizer::encode(&needle_text(&spec.key));
    let query = tokenizer::encode(QUERY);
    if spec.total_len < needle.len() + query.len() {
        return Err(Error::Input(format!(
            "total_len {} cannot fit needle ({}) + query ({})",
            spec.total_len,
            needle.len(),
            query.len()
        )));
    }
    let filler_len = spec.total_len - needle.len() - query.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.filler_seed);
    let mut filler = Vec::with_capacity(filler_len + 64);
    while filler.len() < filler_len {
        let s = FILLER_SENTENCES[rng.gen_range(0..FILLER_SENTENCES.len())];
        filler.extend(tokenizer::encode(s));
    }
    filler.truncate(filler_len);

    let start = needle_start(spec.total_len, needle.len(), query.len(), spec.depth_percent);
    let mut tokens = Vec::with_capacity(spec.total_len);
    tokens.extend_from_slice(&filler[..start]);
    tokens.extend_from_slice(&needle);
    tokens.extend_from_slice(&filler[start..]);
    tokens.extend_from_slice(&query);
    debug_assert_eq!(tokens.len(), spec.total_len);
    Ok(PasskeySample {
        tokens,
        answer: spec.key.clone(),
        needle_span: (start, start + needle.len()),
    })
}

// ─── completers ─────────────────────────────────────────────────────────────

/// Anything that can continue a token sequence; lets the harness self-test
/// with stubs before any model exists.
pub trait Completer {
    fn complete(&mut self, prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>>;
}

/// Greedy decoding through a model.
pub struct ModelCompleter<'a> {
    pub model: &'a Model,
}

impl Completer for ModelCompleter<'_> {
    fn complete(&mut self, prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>> {
        generate(self.model, prompt, n_tokens, Sampler::Greedy, 0)
    }
}

/// Oracle stub: finds the needle in the prompt and echoes its digits.
pub struct EchoStub;

impl Completer for EchoStub {
    fn complete(&mut self, prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>> {
        let text = tokenizer::decode_lossy(prompt);
        let marker = "pass key is ";
        let mut answer = Vec::new();
        let mut search = 0;
        while let Some(at) = text[search..].find(marker) {
            let rest = &text[search + at + marker.len()..];
            let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
            if !digits.is_empty() {
                answer = tokenizer::encode(&digits);
                break;
            }
            search += at + marker.len();
        }
        answer.truncate(n_tokens);
        answer.resize(n_tokens, b'0' as u32);
        Ok(answer)
    }
}

/// Chance-level stub: seeded random digits.
pub struct RandomStub {
    rng: ChaCha8Rng,
}

impl RandomStub {
    pub fn new(seed: u64) -> RandomStub {
        RandomStub { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Completer for RandomStub {
    fn complete(&mut self, _prompt: &[u32], n_tokens: usize) -> Result<Vec<u32>> {
        Ok((0..n_tokens).map(|_| b'0' as u32 + self.rng.gen_range(0..10)).collect())
    }
}

// ─── evaluation grid ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PasskeyGrid {
    pub lens: Vec<usize>,
    pub depths: Vec<f64>,
    pub samples_per_cell: usize,
    pub key_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PasskeyCell {
    pub len: usize,
    pub depth: f64,
    pub accuracy: f64,
    /// Cells whose evaluation exceeded capacity are marked, not failed.
    pub skipped: bool,
}

pub fn random_key(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len).map(|_| char::from(b'0' + rng.gen_range(0..10))).collect()
}

/// Evaluate a completer over the grid: greedy-generate the key digits after
/// the query and score exact match.
pub fn passkey_eval<C: Completer>(completer: &mut C, grid: &PasskeyGrid) -> Result<Vec<PasskeyCell>> {
    let mut cells = Vec::with_capacity(grid.lens.len() * grid.depths.len());
    for &len in &grid.lens {
        for &depth in &grid.depths {
            let mut correct = 0usize;
            let mut skipped = false;
            for s in 0..grid.samples_per_cell {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    grid.seed ^ (len as u64) << 32 ^ (depth.to_bits() >> 12) ^ s as u64,
                );
                let spec = PasskeySpec {
                    total_len: len,
                    depth_percent: depth,
                    key: random_key(&mut rng, grid.key_len),
                    filler_seed: rng.gen(),
                };
                let sample = passkey_make(&spec)?;
                match completer.complete(&sample.tokens, grid.key_len) {
                    Ok(got) => {
                        if tokenizer::decode_lossy(&got) == sample.answer {
                            correct += 1;
                        }
                    }
                    Err(Error::Capacity(_)) => {
                        skipped = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            cells.push(PasskeyCell {
                len,
                depth,
                accuracy: if skipped { 0.0 } else { correct as f64 / grid.samples_per_cell as f64 },
                skipped,
            });
        }
    }
    Ok(cells)
}

/// Evaluate a model over the grid, optionally rebuilding the rotary angles
/// with a different scaling factor first.
pub fn passkey_eval_model(
    model: &Model,
    grid: &PasskeyGrid,
    s_override: Option<f64>,
) -> Result<Vec<PasskeyCell>> {
    let rescaled;
    let model = match s_override {
        Some(s) => {
            rescaled = model.with_rotary_scale(s)?;
            &rescaled
        }
        None => model,
    };
    passkey_eval(&mut ModelCompleter { model }, grid)
}

/// Accuracy matrix as tab-separated text (`len  depth  accuracy`).
pub fn cells_to_table(cells: &[PasskeyCell]) -> String {
    let mut out = String::from("len\tdepth\taccuracy\n");
    for c in cells {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            c.len,
            c.depth,
            if c.skipped { "skipped".to_string() } else { format!("{:.4}", c.accuracy) }
        ));
    }
    out
}

// ─── synthetic training batches ─────────────────────────────────────────────

/// A training batch of passkey samples at a given length: each sequence is
/// `BOS ++ sample ++ key digits`, with the loss mask selecting only the digit
/// targets so the optimizer trains retrieval, not filler modeling.
pub fn passkey_training_batch(
    seq_len: usize,
    batch_size: usize,
    key_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut sequences = Vec::with_capacity(batch_size);
    let mut masks = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let spec = PasskeySpec {
            total_len: seq_len,
            depth_percent: rng.gen::<f64>() * 100.0,
            key: random_key(rng, key_len),
            filler_seed: rng.gen(),
        };
        let sample = passkey_make(&spec)?;
        let mut seq = Vec::with_capacity(seq_len + key_len + 1);
        seq.push(tokenizer::BOS);
        seq.extend_from_slice(&sample.tokens);
        seq.extend(tokenizer::encode(&sample.answer));
        // targets are seq[1..]; digit targets sit at the last key_len slots
        let n_targets = seq.len() - 1;
        let mut mask = vec![false; n_targets];
        for m in mask[n_targets - key_len..].iter_mut() {
            *m = true;
        }
        sequences.push(seq);
        masks.push(mask);
    }
    Ok(Batch { sequences, loss_mask: Some(masks) })
}
