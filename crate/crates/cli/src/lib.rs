//! Operator-facing command line: build / train / extend-context / generate /
//! bench / quantize / qlora / passkey.
//!
//! Every command writes its fully resolved configuration (defaults expanded)
//! to `<out>/resolved_config.json` next to its outputs, so any run can be
//! reproduced from the logged config and seed alone. Outputs are written
//! atomically. Exit codes: 0 success, 1 operational or config error,
//! 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use tinyzamba::checkpoint::{load_model, save_model, write_atomic};
use tinyzamba::inference::{bench, block_microbench, build_pure_baseline, generate, Sampler};
use tinyzamba::model::{build_model, preset, ModelConfig};
use tinyzamba::passkey::{
    cells_to_table, passkey_eval, passkey_eval_model, EchoStub, PasskeyGrid, RandomStub,
};
use tinyzamba::quantize::{
    footprint_model, footprint_quantized, load_quantized, qlora_finetune, quantize_adapters,
    quantize_model, save_adapters, save_quantized, PrecisionPolicy,
};
use tinyzamba::tokenizer;
use tinyzamba::training::{
    curriculum_len, resume_training, run_training, run_training_until, train_step, AdamHyper,
    Batch, CurriculumConfig, OptimizerState, TrainData, TrainPlan,
};
use tinyzamba::attention::LoraTarget;

#[derive(Parser, Debug)]
#[command(name = "tinyzamba", version, about = "Desk-scale hybrid Mamba2 / shared-attention LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a model from a preset or config file and save a checkpoint.
    Build(BuildArgs),
    /// Run the two-phase training protocol from a plan file.
    Train(TrainArgs),
    /// Context-extension finetune with the length-doubling curriculum.
    ExtendContext(ExtendArgs),
    /// Generate tokens from a prompt.
    Generate(GenerateArgs),
    /// Benchmark TTFT, throughput, and cache memory vs a pure transformer.
    Bench(BenchArgs),
    /// Quantize a checkpoint to 4-bit with the SSM-aware policy.
    Quantize(QuantizeArgs),
    /// Finetune LoRA adapters on a frozen quantized model.
    Qlora(QloraArgs),
    /// Passkey-retrieval evaluation grid.
    Passkey(PasskeyArgs),
}

#[derive(Args, Debug, Serialize)]
struct BuildArgs {
    /// Preset name: tiny-1p2b-style | tiny-2p7b-style | tiny-7b-style.
    #[arg(long)]
    preset: Option<String>,
    /// JSON ModelConfig file (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Existing checkpoint to start from.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Preset to initialize from when no checkpoint is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON TrainPlan file.
    #[arg(long)]
    plan: PathBuf,
    /// JSON TrainData file ({"phase1": [[...]], "anneal": [[...]]}).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in --out.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Stop gracefully after this many steps (checkpointing at the stop).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct ExtendArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw text corpus; sequences are concatenated slices of it.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    start_len: usize,
    #[arg(long, default_value_t = 512)]
    target_len: usize,
    #[arg(long, default_value_t = 100)]
    double_every: usize,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, conflicts_with = "prompt_file")]
    prompt: Option<String>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    n_tokens: usize,
    /// greedy | temp:<t> | topk:<k>[,<t>]
    #[arg(long, default_value = "greedy")]
    sampler: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated prompt lengths.
    #[arg(long, default_value = "16,64,256")]
    lens: String,
    #[arg(long, default_value_t = 16)]
    gen_len: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Also run the per-block microbench at this context length.
    #[arg(long)]
    microbench_ctx: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 64)]
    block_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct QloraArgs {
    /// Quantized checkpoint from `quantize`.
    #[arg(long)]
    quantized: PathBuf,
    /// JSON array of token sequences to finetune on.
    #[arg(long)]
    data: PathBuf,
    /// attention | mlp | all
    #[arg(long, default_value = "attention")]
    targets: String,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 16.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also quantize the trained adapters to 4-bit.
    #[arg(long, default_value_t = false)]
    quantize_adapters: bool,
    #[arg(long, default_value_t = 64)]
    block_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PasskeyArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Harness self-test stubs: echo | random.
    #[arg(long, conflicts_with = "model")]
    stub: Option<String>,
    #[arg(long, default_value = "64,128")]
    lens: String,
    #[arg(long, default_value = "0,50,100")]
    depths: String,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    key_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rotary rescale override applied before evaluation.
    #[arg(long)]
    s_override: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Parse and dispatch; returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Build(args) => cmd_build(args),
        Command::Train(args) => cmd_train(args),
        Command::ExtendContext(args) => cmd_extend(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Quantize(args) => cmd_quantize(args),
        Command::Qlora(args) => cmd_qlora(args),
        Command::Passkey(args) => cmd_passkey(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn write_resolved_config<T: Serialize>(out: &Path, args: &T, extra: serde_json::Value) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let resolved = serde_json::json!({ "args": args, "resolved": extra });
    write_atomic(&out.join("resolved_config.json"), serde_json::to_string_pretty(&resolved)?.as_bytes())?;
    Ok(())
}

fn load_config_source(preset_name: &Option<String>, config: &Option<PathBuf>) -> anyhow::Result<ModelConfig> {
    match (config, preset_name) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(serde_json::from_str(&text)?)
        }
        (None, Some(name)) => Ok(preset(name)?),
        (None, None) => bail!("one of --preset or --config is required"),
    }
}

fn cmd_build(args: BuildArgs) -> anyhow::Result<()> {
    let config = load_config_source(&args.preset, &args.config)?;
    let model = build_model(config.clone(), args.seed)?;
    write_resolved_config(&args.out, &args, serde_json::to_value(&config)?)?;
    save_model(&args.out.join("model.ckpt"), &model)?;
    println!("built model: {} parameters -> {}", model.num_params(), args.out.join("model.ckpt").display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let plan: TrainPlan = serde_json::from_str(&fs::read_to_string(&args.plan)?)?;
    let data: TrainData = serde_json::from_str(&fs::read_to_string(&args.data)?)?;
    write_resolved_config(&args.out, &args, serde_json::to_value(&plan)?)?;
    if args.resume {
        let (_, metrics) = resume_training(&plan, &data, &args.out)?;
        println!("resumed: {} further steps logged to {}", metrics.len(), args.out.join("metrics.jsonl").display());
        return Ok(());
    }
    let mut model = match &args.model {
        Some(path) => load_model(path)?,
        None => {
            let name = args.preset.as_deref().context("need --model or --preset")?;
            build_model(preset(name)?, args.seed)?
        }
    };
    let metrics = match args.stop_after {
        Some(n) => run_training_until(&mut model, &plan, &data, &args.out, n)?,
        None => run_training(&mut model, &plan, &data, &args.out)?,
    };
    let last = metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!("trained {} steps, final loss {last:.4}", metrics.len());
    Ok(())
}

fn cmd_extend(args: ExtendArgs) -> anyhow::Result<()> {
    let mut model = load_model(&args.model)?;
    let text = fs::read_to_string(&args.corpus)?;
    let corpus = tokenizer::encode(&text);
    if corpus.len() < args.target_len + 2 {
        bail!("corpus too small: {} tokens for target_len {}", corpus.len(), args.target_len);
    }
    let curriculum = CurriculumConfig {
        start_len: args.start_len,
        target_len: args.target_len,
        double_every: args.double_every,
    };
    write_resolved_config(&args.out, &args, serde_json::to_value(&curriculum)?)?;
    let mut opt = OptimizerState::new(AdamHyper::default());
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut cursor = 0usize;
    let mut metrics = fs::File::create(args.out.join("metrics.jsonl"))?;
    use std::io::Write as _;
    for step in 0..args.steps {
        let len = curriculum_len(step, &curriculum).min(args.target_len);
        let mut sequences = Vec::with_capacity(args.batch_size);
        for _ in 0..args.batch_size {
            // concatenated corpus slices, cycling with a seeded stride
            if cursor + len + 1 > corpus.len() {
                cursor = (rand::Rng::gen_range(&mut rng, 0..97)) % corpus.len().saturating_sub(len + 1).max(1);
            }
            sequences.push(corpus[cursor..cursor + len + 1].to_vec());
            cursor += len + 1;
        }
        let stats = train_step(&mut model, &Batch::from_sequences(sequences), &mut opt, args.lr)?;
        writeln!(
            metrics,
            "{}",
            serde_json::json!({"step": step, "loss": stats.loss, "lr": args.lr, "seq_len": len, "provenance": "extend"})
        )?;
    }
    save_model(&args.out.join("model.ckpt"), &model)?;
    println!("extend-context finetune complete -> {}", args.out.join("model.ckpt").display());
    Ok(())
}

fn parse_sampler(text: &str) -> anyhow::Result<Sampler> {
    if text == "greedy" {
        return Ok(Sampler::Greedy);
    }
    if let Some(t) = text.strip_prefix("temp:") {
        return Ok(Sampler::Temperature(t.parse()?));
    }
    if let Some(rest) = text.strip_prefix("topk:") {
        let (k, t) = match rest.split_once(',') {
            Some((k, t)) => (k.parse()?, t.parse()?),
            None => (rest.parse()?, 1.0),
        };
        return Ok(Sampler::TopK { k, temperature: t });
    }
    bail!("unknown sampler `{text}` (expected greedy | temp:<t> | topk:<k>[,<t>])")
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let prompt_text = match (&args.prompt, &args.prompt_file) {
        (Some(p), _) => p.clone(),
        (None, Some(f)) => fs::read_to_string(f)?,
        (None, None) => bail!("need --prompt or --prompt-file"),
    };
    let sampler = parse_sampler(&args.sampler)?;
    write_resolved_config(&args.out, &args, serde_json::json!({"sampler": sampler}))?;
    let mut prompt = vec![tokenizer::BOS];
    prompt.extend(tokenizer::encode(&prompt_text));
    let tokens = generate(&model, &prompt, args.n_tokens, sampler, args.seed)?;
    let text = tokenizer::decode_lossy(&tokens);
    write_atomic(&args.out.join("generated.txt"), text.as_bytes())?;
    println!("{text}");
    Ok(())
}

fn parse_usize_list(text: &str) -> anyhow::Result<Vec<usize>> {
    text.split(',').map(|s| Ok(s.trim().parse()?)).collect()
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    let model = match (&args.model, &args.preset) {
        (Some(path), _) => load_model(path)?,
        (None, Some(name)) => build_model(preset(name)?, args.seed)?,
        (None, None) => bail!("need --model or --preset"),
    };
    let lens = parse_usize_list(&args.lens)?;
    let baseline = build_pure_baseline(&model.config, args.seed ^ 1)?;
    write_resolved_config(&args.out, &args, serde_json::to_value(&model.config)?)?;
    let mut report = bench(&model, &baseline, &lens, args.gen_len, args.repeats, args.seed)?;
    if let Some(ctx) = args.microbench_ctx {
        report.block_microbench = Some(block_microbench(&model.config, ctx, args.seed)?);
    }
    report.write(&args.out.join("bench.jsonl"), &args.out.join("bench_table.tsv"))?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_quantize(args: QuantizeArgs) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let policy = PrecisionPolicy::ssm_aware();
    let qm = quantize_model(&model, &policy, args.block_size)?;
    write_resolved_config(&args.out, &args, serde_json::to_value(&policy)?)?;
    save_quantized(&args.out.join("model_q4.ckpt"), &qm)?;
    let full = footprint_model(&model);
    let quant = footprint_quantized(&qm);
    let report = serde_json::json!({
        "full_bytes": full,
        "quantized_bytes": quant,
        "ratio": quant.total as f64 / full.total as f64,
    });
    write_atomic(&args.out.join("footprint.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    println!(
        "quantized: {} -> {} bytes (ratio {:.4})",
        full.total,
        quant.total,
        quant.total as f64 / full.total as f64
    );
    Ok(())
}

fn parse_targets(text: &str) -> anyhow::Result<Vec<LoraTarget>> {
    match text {
        "attention" => Ok(LoraTarget::ATTENTION.to_vec()),
        "mlp" => Ok(LoraTarget::MLP.to_vec()),
        "all" => Ok(LoraTarget::ALL.to_vec()),
        other => bail!("unknown targets `{other}` (expected attention | mlp | all)"),
    }
}

fn cmd_qlora(args: QloraArgs) -> anyhow::Result<()> {
    let qm = load_quantized(&args.quantized)?;
    let sequences: Vec<Vec<u32>> = serde_json::from_str(&fs::read_to_string(&args.data)?)?;
    if sequences.is_empty() {
        bail!("empty finetuning data");
    }
    let targets = parse_targets(&args.targets)?;
    write_resolved_config(&args.out, &args, serde_json::json!({"targets": targets}))?;
    let batches: Vec<Batch> = sequences.chunks(1).map(|c| Batch::from_sequences(c.to_vec())).collect();
    let outcome = qlora_finetune(
        &qm, &targets, &batches, args.steps, args.lr, args.rank, args.alpha, args.seed,
    )?;
    save_adapters(&args.out.join("adapters.lora"), &outcome.adapters)?;
    let (first, last) = (
        outcome.loss_trace.first().copied().unwrap_or(f64::NAN),
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
    );
    if args.quantize_adapters {
        let q = quantize_adapters(&outcome.adapters, args.block_size)?;
        let bytes: usize = q.iter().map(|s| s.bytes()).sum();
        write_atomic(
            &args.out.join("adapters_q4.json"),
            serde_json::to_string_pretty(&serde_json::json!({"quantized_adapter_bytes": bytes}))?.as_bytes(),
        )?;
    }
    println!("qlora: loss {first:.4} -> {last:.4} over {} steps", outcome.loss_trace.len());
    Ok(())
}

fn parse_f64_list(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',').map(|s| Ok(s.trim().parse()?)).collect()
}

fn cmd_passkey(args: PasskeyArgs) -> anyhow::Result<()> {
    let grid = PasskeyGrid {
        lens: parse_usize_list(&args.lens)?,
        depths: parse_f64_list(&args.depths)?,
        samples_per_cell: args.samples,
        key_len: args.key_len,
        seed: args.seed,
    };
    write_resolved_config(&args.out, &args, serde_json::to_value(&grid)?)?;
    let cells = match (&args.model, args.stub.as_deref()) {
        (Some(path), None) => {
            let model = load_model(path)?;
            passkey_eval_model(&model, &grid, args.s_override)?
        }
        (None, Some("echo")) => passkey_eval(&mut EchoStub, &grid)?,
        (None, Some("random")) => passkey_eval(&mut RandomStub::new(args.seed), &grid)?,
        (None, Some(other)) => bail!("unknown stub `{other}`"),
        (None, None) => bail!("need --model or --stub"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let table = cells_to_table(&cells);
    write_atomic(&args.out.join("passkey_matrix.tsv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
