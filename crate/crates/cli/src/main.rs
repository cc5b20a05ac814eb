use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use echo_core::adapt::{ablate_steps, adapt, perplexity, pretrain, AdaptMode, TrainConfig};
use echo_core::harness::bench::{benchmark, compute_mfu, BenchMode};
use echo_core::harness::checkpoint::{load_checkpoint, save_checkpoint, Dtype};
use echo_core::harness::corpus::{synthetic_bigram, Corpus};
use echo_core::harness::metrics::{MetricsRow, MetricsWriter};
use echo_core::harness::seed_from_env;
use echo_core::harness::tokenizer::{detokenize, BOS, EOS};
use echo_core::{decode_step, kv_memory_report, prefill, EchoModel, ModelConfig, StageReport};

#[derive(Parser)]
#[command(
    name = "echo",
    version,
    about = "Shared-KV decoder training, adaptation and benchmarking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialise a model from a config file or preset and write a checkpoint.
    Init(InitArgs),
    /// Train every parameter of a model on a corpus.
    Pretrain(PretrainArgs),
    /// Convert the deepest layers of a baseline to read the shared KV.
    Adapt(AdaptArgs),
    /// Measure prefill, decode or training throughput.
    Bench(BenchArgs),
    /// Print KV weight and cache memory against the baseline.
    MemoryReport(MemoryArgs),
    /// Greedy generation from a prompt.
    Decode(DecodeArgs),
    /// Held-out loss of one converted layer across a grid of step counts.
    AblateSteps(AblateArgs),
    /// Write a synthetic bigram corpus.
    SynthCorpus(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// CSV file receiving one metrics row per step or measurement.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Identifier written into every metrics row.
    #[arg(long, default_value = "echo")]
    run_id: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus file, read as raw bytes.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Window length in tokens.
    #[arg(long, default_value_t = 65)]
    seq_len: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seeds the window order (ECHO_SEED overrides).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let mut c = TrainConfig::desk(self.batch, self.seq_len);
        c.lr = self.lr;
        c.seed = seed_from_env(self.seed);
        c
    }

    fn corpus(&self) -> Result<Corpus> {
        let bytes = std::fs::read(&self.corpus)
            .with_context(|| format!("reading {}", self.corpus.display()))?;
        Ok(Corpus::from_bytes(&bytes, self.seq_len)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Args)]
struct InitArgs {
    /// JSON config file, or one of the presets `desk`, `llama-125m`.
    #[arg(long)]
    config: String,
    /// Initialisation seed; ECHO_SEED overrides it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Output checkpoint; defaults to overwriting --model.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Incremental,
    FullStage,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    /// Fraction p of layers to convert; floor(p * L) layers are converted.
    #[arg(long)]
    shared_fraction: f64,
    #[arg(long, value_enum, default_value = "incremental")]
    mode: ModeArg,
    #[arg(long, default_value_t = 150)]
    steps_per_stage: usize,
    /// Layers converted together per stage.
    #[arg(long, default_value_t = 1)]
    block_size: usize,
    /// Token budget of the final fine-tune; defaults to four stage budgets.
    #[arg(long)]
    final_tokens: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mode: BenchMode,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 128)]
    seq: usize,
    /// Timed iterations.
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Device peak in FLOPs per second; enables the MFU column.
    #[arg(long)]
    peak_flops: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct MemoryArgs {
    /// JSON config file, or one of the presets `desk`, `llama-125m`.
    #[arg(long)]
    config: String,
    /// Overrides the config's self-attention layer count with L - floor(p * L).
    #[arg(long)]
    shared_fraction: Option<f64>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 2048)]
    seq: usize,
    #[arg(long, default_value_t = 2)]
    bytes_per_scalar: usize,
    /// CSV file receiving the full report.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_new: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    /// 1-based layer whose conversion is ablated.
    #[arg(long)]
    layer: usize,
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,150,200,300")]
    grid: Vec<usize>,
    /// Fraction of windows held out for evaluation.
    #[arg(long, default_value_t = 0.1)]
    holdout: f64,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    bytes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Init(a) => init(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Bench(a) => bench(a),
        Command::MemoryReport(a) => memory_report(a),
        Command::Decode(a) => decode(a),
        Command::AblateSteps(a) => ablate(a),
        Command::SynthCorpus(a) => {
            std::fs::write(&a.out, synthetic_bigram(a.bytes, seed_from_env(a.seed)))?;
            println!("wrote {} bytes to {}", a.bytes, a.out.display());
            Ok(())
        }
    }
}

fn load_config(spec: &str) -> Result<ModelConfig> {
    match spec {
        "desk" => Ok(ModelConfig::desk()),
        "llama-125m" => Ok(ModelConfig::llama_125m()),
        path => {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading config {path}"))?;
            Ok(ModelConfig::from_json(&text)?)
        }
    }
}

fn load(path: &Path) -> Result<EchoModel> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn write_metrics(common: &Common, rows: &[MetricsRow]) -> Result<()> {
    if let Some(path) = &common.metrics {
        let mut w = MetricsWriter::create(path)?;
        w.write_all(rows)?;
        w.finish()?;
    }
    Ok(())
}

fn target_self_layers(layers: usize, p: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        bail!("--shared-fraction must lie in [0, 1], got {p}");
    }
    Ok(layers - (p * layers as f64).floor() as usize)
}

fn print_report(r: &StageReport) {
    println!(
        "{:<10} layers={:?} steps={} tokens={} loss {:.4} -> {:.4} ({:.1}s)",
        r.phase.to_string(),
        r.converted_layers,
        r.steps_run,
        r.tokens_seen,
        r.loss_start,
        r.loss_end,
        r.wall_seconds
    );
}

fn init(a: InitArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.seed = seed_from_env(a.seed.unwrap_or(cfg.seed));
    let model = EchoModel::init(cfg)?;
    save_checkpoint(&model, &a.out, a.dtype.into())?;
    println!(
        "initialised {} parameters ({} layers, {} self-attention) -> {}",
        model.param_count(),
        model.n_layers(),
        model.n_self_layers(),
        a.out.display()
    );
    write_metrics(&a.common, &[])
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut model = load(&a.model)?;
    let corpus = a.train.corpus()?;
    let report = pretrain(&mut model, &corpus, a.steps, &a.train.config())?;
    print_report(&report);
    save_checkpoint(&model, a.out.as_ref().unwrap_or(&a.model), Dtype::F64)?;
    write_metrics(
        &a.common,
        &MetricsRow::from_report(&a.common.run_id, &report),
    )
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let model = load(&a.model)?;
    let target = target_self_layers(model.n_layers(), a.shared_fraction)?;
    let mut cfg = a.train.config().with_steps_per_stage(a.steps_per_stage);
    cfg.block_size = a.block_size;
    cfg.mode = match a.mode {
        ModeArg::Incremental => AdaptMode::Incremental,
        ModeArg::FullStage => AdaptMode::FullStage,
    };
    if let Some(t) = a.final_tokens {
        cfg.final_tokens = t;
    }
    let corpus = a.train.corpus()?;
    let (adapted, reports) = adapt(&model, target, &cfg, &corpus, &mut ())?;
    for r in &reports {
        print_report(r);
    }
    println!(
        "converted {} of {} layers; {} self-attention layers remain",
        adapted.n_layers() - adapted.n_self_layers(),
        adapted.n_layers(),
        adapted.n_self_layers()
    );
    println!(
        "corpus perplexity {:.4}",
        perplexity(&adapted, &corpus, cfg.batch_size)?
    );
    save_checkpoint(&adapted, &a.out, Dtype::F64)?;
    let rows: Vec<MetricsRow> = reports
        .iter()
        .flat_map(|r| MetricsRow::from_report(&a.common.run_id, r))
        .collect();
    write_metrics(&a.common, &rows)
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = load(&a.model)?;
    let result = benchmark(&model, a.mode, a.batch, a.seq, a.steps)?;
    let mfu = match a.peak_flops {
        Some(p) => Some(compute_mfu(
            result.median_tokens_per_sec,
            &model,
            Some(p),
            a.mode.is_training(),
        )?),
        None => None,
    };
    println!(
        "{} batch={} seq={}: {:.1} tokens/s (median of {})",
        a.mode,
        a.batch,
        a.seq,
        result.median_tokens_per_sec,
        result.samples.len()
    );
    match mfu {
        Some(m) => println!("mfu {m:.4}%"),
        None => println!("mfu not computed; pass --peak-flops <FLOPs per second>"),
    }
    write_metrics(&a.common, &[result.to_row(&a.common.run_id, mfu)])
}

fn memory_report(a: MemoryArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(p) = a.shared_fraction {
        cfg.n_self_layers = target_self_layers(cfg.n_layers, p)?;
    }
    let r = kv_memory_report(&cfg, a.batch, a.seq, a.bytes_per_scalar)?;
    println!(
        "layers {} self_layers {} shared_fraction {:.6}",
        r.layers, r.self_layers, r.shared_fraction
    );
    println!(
        "kv_param_bytes baseline {} echo {}",
        r.baseline_kv_param_bytes, r.echo_kv_param_bytes
    );
    println!(
        "cache_bytes baseline {} echo {}",
        r.baseline_cache_bytes, r.echo_cache_bytes
    );
    println!("param_ratio {:.6}", r.param_ratio);
    println!("cache_ratio {:.6}", r.cache_ratio);
    if let Some(path) = &a.metrics {
        let mut w = csv::Writer::from_path(path)?;
        w.serialize(&r)?;
        w.flush()?;
    }
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let model = load(&a.model)?;
    let mut ids = vec![BOS];
    ids.extend(a.prompt.bytes().map(usize::from));
    let t0 = Instant::now();
    let (mut cache, logits) = prefill(&model, &ids)?;
    let vocab = model.config.vocab_size;
    let mut next = argmax(&logits.data()[logits.data().len() - vocab..]);
    let mut generated = Vec::new();
    while generated.len() < a.max_new && next != EOS {
        generated.push(next);
        if generated.len() == a.max_new {
            break;
        }
        next = argmax(decode_step(&model, &mut cache, next)?.data());
    }
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    println!(
        "{}{}",
        a.prompt,
        String::from_utf8_lossy(&detokenize(&generated))
    );
    let row = MetricsRow {
        run_id: a.common.run_id.clone(),
        phase: "decode".into(),
        step: generated.len(),
        loss: None,
        tokens_seen: ids.len() + generated.len(),
        wall_ms: ms,
        tokens_per_sec: if ms > 0.0 {
            generated.len() as f64 / (ms / 1e3)
        } else {
            0.0
        },
        mfu_percent: None,
    };
    write_metrics(&a.common, &[row])
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let model = load(&a.model)?;
    let (train, eval) = a.train.corpus()?.split_holdout(a.holdout);
    if eval.is_empty() {
        bail!(
            "holdout fraction {} leaves no evaluation windows",
            a.holdout
        );
    }
    let (points, report) =
        ablate_steps(&model, a.layer, &a.grid, &a.train.config(), &train, &eval)?;
    println!("steps  eval_loss  train_loss");
    let mut rows = Vec::with_capacity(points.len());
    let per_step = report.tokens_seen / report.steps_run.max(1);
    for p in &points {
        println!(
            "{:>5}  {:>9.4}  {:>10.4}",
            p.steps, p.eval_loss, p.train_loss
        );
        let wall: f64 = report.step_wall_ms[..p.steps].iter().sum();
        rows.push(MetricsRow {
            run_id: a.common.run_id.clone(),
            phase: "ablate".into(),
            step: p.steps,
            loss: Some(p.eval_loss),
            tokens_seen: per_step * p.steps,
            wall_ms: wall,
            tokens_per_sec: if wall > 0.0 {
                (per_step * p.steps) as f64 / (wall / 1e3)
            } else {
                0.0
            },
            mfu_percent: None,
        });
    }
    write_metrics(&a.common, &rows)
}
