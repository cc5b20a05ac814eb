//! Layer-wise adaptation of a baseline model into a shared-KV model.
//!
//! The incremental schedule converts layers deepest first, one block per
//! stage, training only the converted block and the global projector while
//! everything else stays frozen, then fine-tunes every parameter. The
//! full-stage schedule converts all target layers at once and trains them
//! jointly on the same token budget.

pub mod optim;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use optim::{Adam, AdamConfig};

use crate::error::{EchoError, Result};
use crate::harness::corpus::{Corpus, DataStream};
use crate::model::EchoModel;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    Incremental,
    FullStage,
}

impl FromStr for AdaptMode {
    type Err = EchoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incremental" => Ok(Self::Incremental),
            "full-stage" | "full_stage" => Ok(Self::FullStage),
            other => Err(EchoError::Config(format!(
                "unknown adaptation mode `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Optimizer steps per stage (upper bound).
    pub steps_per_stage: usize,
    /// Token budget per stage.
    pub stage_tokens: usize,
    /// Token budget of the final full fine-tune.
    pub final_tokens: usize,
    /// Layers converted and trained together in one stage.
    pub block_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Window length in tokens; the model sees `seq_len - 1` positions.
    pub seq_len: usize,
    pub mode: AdaptMode,
    /// Seeds the order in which corpus windows are visited.
    pub seed: u64,
}

impl TrainConfig {
    /// 150 steps per stage, a stage budget of exactly 150 full batches and a
    /// final budget of four stages.
    pub fn desk(batch_size: usize, seq_len: usize) -> Self {
        let stage_tokens = 150 * batch_size * seq_len;
        Self {
            steps_per_stage: 150,
            stage_tokens,
            final_tokens: 4 * stage_tokens,
            block_size: 1,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size,
            seq_len,
            mode: AdaptMode::Incremental,
            seed: 0,
        }
    }

    /// Keeps the stage budget at exactly `steps` full batches.
    pub fn with_steps_per_stage(mut self, steps: usize) -> Self {
        self.steps_per_stage = steps;
        self.stage_tokens = steps * self.tokens_per_step();
        self
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.seq_len
    }

    /// Steps one stage actually runs: `min(S, floor(T_stage / (batch*seq)))`.
    pub fn stage_steps(&self) -> usize {
        self.steps_per_stage
            .min(self.stage_tokens / self.tokens_per_step())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(EchoError::Config(m.to_string()));
        if self.steps_per_stage == 0 {
            return fail("steps_per_stage must be >= 1");
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return fail("batch_size must be >= 1 and seq_len >= 2");
        }
        if self.stage_tokens < self.tokens_per_step() {
            return fail("stage_tokens must cover at least one batch (batch_size * seq_len)");
        }
        if self.block_size == 0 {
            return fail("block_size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive and finite");
        }
        Ok(())
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if corpus.seq_len() != self.seq_len {
            return Err(EchoError::Data(format!(
                "corpus windows have {} tokens, training expects {}",
                corpus.seq_len(),
                self.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    /// One incremental stage, numbered from 1.
    Stage(usize),
    FullStage,
    Final,
    Ablation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Pretrain => f.write_str("pretrain"),
            Phase::Stage(k) => write!(f, "stage-{k}"),
            Phase::FullStage => f.write_str("full-stage"),
            Phase::Final => f.write_str("final"),
            Phase::Ablation => f.write_str("ablate"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage_index: usize,
    pub phase: Phase,
    /// Layers trained in this stage (empty for whole-model phases).
    pub converted_layers: Vec<usize>,
    pub steps_run: usize,
    pub tokens_seen: usize,
    pub loss_start: f64,
    pub loss_end: f64,
    pub wall_seconds: f64,
    /// Training loss of every step, measured before its update.
    pub trace: Vec<f64>,
    /// Wall-clock duration of every step.
    pub step_wall_ms: Vec<f64>,
}

impl StageReport {
    fn new(stage_index: usize, phase: Phase, converted_layers: Vec<usize>) -> Self {
        Self {
            stage_index,
            phase,
            converted_layers,
            steps_run: 0,
            tokens_seen: 0,
            loss_start: f64::NAN,
            loss_end: f64::NAN,
            wall_seconds: 0.0,
            trace: Vec::new(),
            step_wall_ms: Vec::new(),
        }
    }

    fn record(&mut self, loss: f64, tokens: usize, ms: f64) {
        if self.trace.is_empty() {
            self.loss_start = loss;
        }
        self.loss_end = loss;
        self.trace.push(loss);
        self.step_wall_ms.push(ms);
        self.steps_run += 1;
        self.tokens_seen += tokens;
        self.wall_seconds += ms / 1e3;
    }
}

/// Hooks called around every training phase of an adaptation run.
pub trait StageObserver {
    /// Called after the stage's layers are converted and frozen flags set,
    /// before the first step.
    fn stage_start(&mut self, _phase: Phase, _layers: &[usize], _model: &EchoModel) {}
    fn stage_end(&mut self, _report: &StageReport, _model: &EchoModel) {}
}

impl StageObserver for () {}

/// Mean negative log-likelihood of `targets` under `logits` `[B x T x V]`
/// (or any shape whose last axis is the vocabulary).
pub fn cross_entropy_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let vocab = logits.cols();
    let flat = logits
        .clone()
        .reshape(&[logits.len() / vocab.max(1), vocab])?;
    let mut tape = Tape::no_grad();
    let x = tape.constant(flat);
    let loss = tape.cross_entropy(x, targets)?;
    Ok(tape.value(loss).item())
}

/// Runs up to `steps` optimizer steps, drawing at most `window_budget`
/// windows from `stream`.
fn train_steps(
    model: &mut EchoModel,
    stream: &mut DataStream<'_>,
    cfg: &TrainConfig,
    steps: usize,
    window_budget: usize,
    report: &mut StageReport,
) -> Result<()> {
    let mut adam = Adam::new(cfg.adam());
    let mut windows_left = window_budget;
    for _ in 0..steps {
        let Some(batch) = stream.next_batch(cfg.batch_size, windows_left) else {
            break;
        };
        windows_left -= batch.batch;
        let t0 = Instant::now();
        model.zero_grad();
        let loss = model.loss_and_grad(&batch.inputs, &batch.targets, batch.batch, batch.seq)?;
        adam.step(model.params_mut());
        model.zero_grad();
        report.record(loss, batch.tokens, t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}

/// Bit patterns of every frozen parameter, for checking after a stage.
fn frozen_snapshot(model: &EchoModel) -> Vec<(String, Vec<u64>)> {
    model
        .params()
        .into_iter()
        .filter(|p| p.frozen)
        .map(|p| {
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn verify_frozen(model: &EchoModel, snapshot: &[(String, Vec<u64>)]) -> Result<()> {
    for (name, bits) in snapshot {
        let p = model
            .param(name)
            .ok_or_else(|| EchoError::UnknownParameter(name.clone()))?;
        if p.value
            .data()
            .iter()
            .map(|v| v.to_bits())
            .ne(bits.iter().copied())
        {
            return Err(EchoError::FreezeViolation(name.clone()));
        }
    }
    Ok(())
}

fn trainable_names(model: &EchoModel, layers: &[usize]) -> HashSet<String> {
    layers
        .iter()
        .flat_map(|&l| model.layer_param_names(l))
        .chain(model.global_kv_param_names())
        .collect()
}

fn check_converted(model: &EchoModel, layers: &[usize]) -> Result<()> {
    for &l in layers {
        if !model.blocks_cross.iter().any(|b| b.layer == l) {
            return Err(EchoError::ConversionOrder {
                layer: l,
                reason: "stage layers must be converted before training".into(),
            });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut EchoModel,
    layers: &[usize],
    stream: &mut DataStream<'_>,
    cfg: &TrainConfig,
    steps: usize,
    phase: Phase,
    stage_index: usize,
    observer: &mut dyn StageObserver,
) -> Result<StageReport> {
    check_converted(model, layers)?;
    model.freeze_all_except(&trainable_names(model, layers))?;
    let snapshot = frozen_snapshot(model);
    observer.stage_start(phase, layers, model);
    let mut report = StageReport::new(stage_index, phase, layers.to_vec());
    train_steps(model, stream, cfg, steps, usize::MAX, &mut report)?;
    verify_frozen(model, &snapshot)?;
    observer.stage_end(&report, model);
    Ok(report)
}

/// Trains the (already converted) `block_layers` plus the global projector
/// for `min(S, floor(T_stage / (batch*seq)))` steps with every other
/// parameter frozen.
pub fn stage_update(
    model: &mut EchoModel,
    block_layers: &[usize],
    stream: &mut DataStream<'_>,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    run_stage(
        model,
        block_layers,
        stream,
        cfg,
        cfg.stage_steps(),
        Phase::Stage(1),
        1,
        &mut (),
    )
}

/// Stage blocks for converting `L, L-1, ..., target+1`, deepest first.
pub fn stage_blocks(
    n_layers: usize,
    target_self_layers: usize,
    block_size: usize,
) -> Vec<Vec<usize>> {
    let order: Vec<usize> = (target_self_layers + 1..=n_layers).rev().collect();
    order
        .chunks(block_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

fn check_target(model: &EchoModel, target: usize) -> Result<()> {
    if !model.is_baseline() {
        return Err(EchoError::Config(
            "adaptation starts from a baseline model (N == L)".into(),
        ));
    }
    let l = model.n_layers();
    let lo = model.config.min_self_layers();
    if target < lo || target >= l {
        return Err(EchoError::Config(format!(
            "target self-attention layers {target} outside [{lo}, {}]",
            l - 1
        )));
    }
    Ok(())
}

pub fn incremental_adapt(
    pretrained: &EchoModel,
    target_self_layers: usize,
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<(EchoModel, Vec<StageReport>)> {
    incremental_adapt_observed(pretrained, target_self_layers, cfg, corpus, &mut ())
}

/// Converts and trains one block per stage, then runs the final fine-tune.
/// Returns the stage reports followed by the final report.
pub fn incremental_adapt_observed(
    pretrained: &EchoModel,
    target_self_layers: usize,
    cfg: &TrainConfig,
    corpus: &Corpus,
    observer: &mut dyn StageObserver,
) -> Result<(EchoModel, Vec<StageReport>)> {
    cfg.validate()?;
    cfg.check_corpus(corpus)?;
    check_target(pretrained, target_self_layers)?;
    let order = corpus.shuffled(cfg.seed);
    let mut stream = DataStream::cycling(&order)?;
    let mut model = pretrained.clone();
    let mut reports = Vec::new();
    for (i, block) in stage_blocks(model.n_layers(), target_self_layers, cfg.block_size)
        .iter()
        .enumerate()
    {
        for &layer in block {
            model.convert_layer_to_cross_decoder(layer)?;
        }
        let k = i + 1;
        reports.push(run_stage(
            &mut model,
            block,
            &mut stream,
            cfg,
            cfg.stage_steps(),
            Phase::Stage(k),
            k,
            observer,
        )?);
    }
    reports.push(final_finetune_observed(
        &mut model,
        cfg,
        &order,
        reports.len() + 1,
        observer,
    )?);
    Ok((model, reports))
}

pub fn full_stage_adapt(
    pretrained: &EchoModel,
    target_self_layers: usize,
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<(EchoModel, StageReport)> {
    full_stage_adapt_observed(pretrained, target_self_layers, cfg, corpus, &mut ())
}

/// Converts every target layer up front and trains them and the projector
/// jointly for as many steps as the incremental schedule would spend on its
/// stages.
pub fn full_stage_adapt_observed(
    pretrained: &EchoModel,
    target_self_layers: usize,
    cfg: &TrainConfig,
    corpus: &Corpus,
    observer: &mut dyn StageObserver,
) -> Result<(EchoModel, StageReport)> {
    cfg.validate()?;
    cfg.check_corpus(corpus)?;
    check_target(pretrained, target_self_layers)?;
    let order = corpus.shuffled(cfg.seed);
    let mut stream = DataStream::cycling(&order)?;
    let mut model = pretrained.clone();
    model.convert_down_to(target_self_layers)?;
    let n_stages = stage_blocks(model.n_layers(), target_self_layers, cfg.block_size).len();
    let layers: Vec<usize> = (target_self_layers + 1..=model.n_layers()).rev().collect();
    let steps = n_stages * cfg.stage_steps();
    let report = run_stage(
        &mut model,
        &layers,
        &mut stream,
        cfg,
        steps,
        Phase::FullStage,
        1,
        observer,
    )?;
    Ok((model, report))
}

/// Dispatches on `cfg.mode`. Both modes end with the final fine-tune, so the
/// two arms spend identical token budgets.
pub fn adapt(
    pretrained: &EchoModel,
    target_self_layers: usize,
    cfg: &TrainConfig,
    corpus: &Corpus,
    observer: &mut dyn StageObserver,
) -> Result<(EchoModel, Vec<StageReport>)> {
    match cfg.mode {
        AdaptMode::Incremental => {
            incremental_adapt_observed(pretrained, target_self_layers, cfg, corpus, observer)
        }
        AdaptMode::FullStage => {
            let (mut model, joint) =
                full_stage_adapt_observed(pretrained, target_self_layers, cfg, corpus, observer)?;
            let order = corpus.shuffled(cfg.seed);
            let last = final_finetune_observed(&mut model, cfg, &order, 2, observer)?;
            Ok((model, vec![joint, last]))
        }
    }
}

/// Unfreezes everything and makes one pass over `min(T_final, corpus)`
/// tokens, in whole windows.
pub fn final_finetune(
    model: &mut EchoModel,
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<StageReport> {
    cfg.validate()?;
    cfg.check_corpus(corpus)?;
    final_finetune_observed(model, cfg, corpus, 1, &mut ())
}

fn final_finetune_observed(
    model: &mut EchoModel,
    cfg: &TrainConfig,
    corpus: &Corpus,
    stage_index: usize,
    observer: &mut dyn StageObserver,
) -> Result<StageReport> {
    model.unfreeze_all();
    let windows = (cfg.final_tokens / cfg.seq_len).min(corpus.len());
    let mut stream = DataStream::one_pass(corpus)?;
    observer.stage_start(Phase::Final, &[], model);
    let mut report = StageReport::new(stage_index, Phase::Final, Vec::new());
    train_steps(
        model,
        &mut stream,
        cfg,
        windows.div_ceil(cfg.batch_size),
        windows,
        &mut report,
    )?;
    observer.stage_end(&report, model);
    Ok(report)
}

/// Trains every parameter of `model` for `steps` steps, cycling over the
/// corpus. Used to produce the baseline that adaptation starts from.
pub fn pretrain(
    model: &mut EchoModel,
    corpus: &Corpus,
    steps: usize,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    cfg.check_corpus(corpus)?;
    model.unfreeze_all();
    let order = corpus.shuffled(cfg.seed);
    let mut stream = DataStream::cycling(&order)?;
    let mut report = StageReport::new(0, Phase::Pretrain, Vec::new());
    train_steps(model, &mut stream, cfg, steps, usize::MAX, &mut report)?;
    Ok(report)
}

/// Mean next-token loss over every window of `corpus`.
pub fn evaluate_loss(model: &EchoModel, corpus: &Corpus, batch: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(EchoError::Data(
            "evaluation corpus holds no complete window".into(),
        ));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for b in corpus.batches(batch) {
        let n = b.targets.len();
        total += model.loss(&b.inputs, &b.targets, b.batch, b.seq)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

pub fn perplexity(model: &EchoModel, corpus: &Corpus, batch: usize) -> Result<f64> {
    Ok(evaluate_loss(model, corpus, batch)?.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeComparison {
    pub target_self_layers: usize,
    /// Perplexity after conversion, before any training.
    pub untrained_ppl: f64,
    pub incremental_ppl: f64,
    pub full_stage_ppl: f64,
    pub incremental_tokens: usize,
    pub full_stage_tokens: usize,
}

/// Runs both schedules from the same baseline and corpus order and reports
/// held-out perplexities side by side.
pub fn compare_modes(
    pretrained: &EchoModel,
    target_self_layers: usize,
    cfg: &TrainConfig,
    train: &Corpus,
    eval: &Corpus,
) -> Result<ModeComparison> {
    let mut untrained = pretrained.clone();
    untrained.convert_down_to(target_self_layers)?;
    let inc_cfg = TrainConfig {
        mode: AdaptMode::Incremental,
        ..cfg.clone()
    };
    let fs_cfg = TrainConfig {
        mode: AdaptMode::FullStage,
        ..cfg.clone()
    };
    let (inc, inc_reports) = adapt(pretrained, target_self_layers, &inc_cfg, train, &mut ())?;
    let (fs, fs_reports) = adapt(pretrained, target_self_layers, &fs_cfg, train, &mut ())?;
    let tokens = |r: &[StageReport]| r.iter().map(|s| s.tokens_seen).sum();
    Ok(ModeComparison {
        target_self_layers,
        untrained_ppl: perplexity(&untrained, eval, cfg.batch_size)?,
        incremental_ppl: perplexity(&inc, eval, cfg.batch_size)?,
        full_stage_ppl: perplexity(&fs, eval, cfg.batch_size)?,
        incremental_tokens: tokens(&inc_reports),
        full_stage_tokens: tokens(&fs_reports),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationPoint {
    pub steps: usize,
    pub eval_loss: f64,
    pub train_loss: f64,
}

/// Held-out loss of converted layer `layer` after each step count in
/// `grid`, measured along a single training trajectory.
///
/// Layers deeper than `layer` are first converted and trained with the
/// regular per-stage schedule; `layer` is then converted and trained for
/// `max(grid)` steps with only it and the projector unfrozen.
pub fn ablate_steps(
    pretrained: &EchoModel,
    layer: usize,
    grid: &[usize],
    cfg: &TrainConfig,
    train: &Corpus,
    eval: &Corpus,
) -> Result<(Vec<AblationPoint>, StageReport)> {
    cfg.validate()?;
    cfg.check_corpus(train)?;
    if layer == 0 {
        return Err(EchoError::Config("layers are numbered from 1".into()));
    }
    check_target(pretrained, layer - 1)?;
    if grid.is_empty() || grid.contains(&0) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EchoError::Config(
            "ablation grid must be strictly increasing positive step counts".into(),
        ));
    }
    let order = train.shuffled(cfg.seed);
    let mut stream = DataStream::cycling(&order)?;
    let mut model = pretrained.clone();
    for deeper in (layer + 1..=model.n_layers()).rev() {
        model.convert_layer_to_cross_decoder(deeper)?;
        run_stage(
            &mut model,
            &[deeper],
            &mut stream,
            cfg,
            cfg.stage_steps(),
            Phase::Stage(0),
            0,
            &mut (),
        )?;
    }
    model.convert_layer_to_cross_decoder(layer)?;
    model.freeze_all_except(&trainable_names(&model, &[layer]))?;
    let mut report = StageReport::new(0, Phase::Ablation, vec![layer]);
    let mut adam = Adam::new(cfg.adam());
    let mut points = Vec::with_capacity(grid.len());
    let last = *grid.last().expect("non-empty grid");
    for step in 1..=last {
        let batch = stream
            .next_batch(cfg.batch_size, usize::MAX)
            .expect("cycling stream never ends");
        let t0 = Instant::now();
        model.zero_grad();
        let loss = model.loss_and_grad(&batch.inputs, &batch.targets, batch.batch, batch.seq)?;
        adam.step(model.params_mut());
        model.zero_grad();
        report.record(loss, batch.tokens, t0.elapsed().as_secs_f64() * 1e3);
        if grid.contains(&step) {
            points.push(AblationPoint {
                steps: step,
                eval_loss: evaluate_loss(&model, eval, cfg.batch_size)?,
                train_loss: loss,
            });
        }
    }
    Ok((points, report))
}
