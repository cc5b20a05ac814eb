//! Throughput and model-FLOPs-utilisation measurement.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsRow;
use crate::adapt::{Adam, AdamConfig};
use crate::error::{EchoError, Result};
use crate::kv_cache::{decode_step, prefill, DecodeCaches};
use crate::model::EchoModel;

/// Untimed iterations run before measuring.
pub const WARMUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Prefill,
    Decode,
    Train,
}

impl BenchMode {
    pub fn is_training(self) -> bool {
        self == BenchMode::Train
    }
}

impl FromStr for BenchMode {
    type Err = EchoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Self::Prefill),
            "decode" => Ok(Self::Decode),
            "train" => Ok(Self::Train),
            other => Err(EchoError::Config(format!("unknown bench mode `{other}`"))),
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Prefill => "prefill",
            BenchMode::Decode => "decode",
            BenchMode::Train => "train",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub batch: usize,
    pub seq: usize,
    /// Tokens processed by one timed iteration.
    pub tokens_per_iter: usize,
    /// Tokens/sec of each timed iteration.
    pub samples: Vec<f64>,
    pub median_tokens_per_sec: f64,
    pub total_wall_ms: f64,
    /// Mean training loss over timed iterations (train mode only).
    pub loss: Option<f64>,
}

impl BenchResult {
    pub fn to_row(&self, run_id: &str, mfu_percent: Option<f64>) -> MetricsRow {
        MetricsRow {
            run_id: run_id.to_string(),
            phase: "bench".into(),
            step: self.samples.len(),
            loss: self.loss,
            tokens_seen: self.tokens_per_iter * self.samples.len(),
            wall_ms: self.total_wall_ms,
            tokens_per_sec: self.median_tokens_per_sec,
            mfu_percent,
        }
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `steps` iterations after [`WARMUP`] untimed ones.
///
/// * `prefill`: one iteration prefills `batch` streams of `seq` tokens.
/// * `decode`: `batch` streams start from one `seq`-token prefill (untimed),
///   then one iteration decodes one token per stream.
/// * `train`: one iteration is a forward/backward pass over `batch x seq`
///   tokens plus an Adam update, on a private copy of the model.
pub fn benchmark(
    model: &EchoModel,
    mode: BenchMode,
    batch: usize,
    seq: usize,
    steps: usize,
) -> Result<BenchResult> {
    if batch == 0 || seq == 0 || steps == 0 {
        return Err(EchoError::Config(
            "batch, seq and steps must all be >= 1".into(),
        ));
    }
    let max = model.config.max_seq;
    let needed = match mode {
        BenchMode::Decode => seq + WARMUP + steps,
        BenchMode::Prefill | BenchMode::Train => seq,
    };
    if needed > max {
        return Err(EchoError::SequenceLength { len: needed, max });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    let vocab = model.config.vocab_size;
    let mut tokens =
        |n: usize| -> Vec<usize> { (0..n).map(|_| rng.random_range(0..vocab)).collect() };
    let mut samples = Vec::with_capacity(steps);
    let mut losses = Vec::new();
    let mut total_ms = 0.0;
    let tokens_per_iter;
    let mut time = |i: usize, ms: f64, samples: &mut Vec<f64>, n: usize| {
        if i >= WARMUP {
            total_ms += ms;
            samples.push(super::metrics::rate(n, ms));
        }
    };
    match mode {
        BenchMode::Prefill => {
            tokens_per_iter = batch * seq;
            let streams: Vec<Vec<usize>> = (0..batch).map(|_| tokens(seq)).collect();
            for i in 0..WARMUP + steps {
                let t0 = Instant::now();
                for s in &streams {
                    std::hint::black_box(prefill(model, s)?);
                }
                time(
                    i,
                    t0.elapsed().as_secs_f64() * 1e3,
                    &mut samples,
                    tokens_per_iter,
                );
            }
        }
        BenchMode::Decode => {
            tokens_per_iter = batch;
            // decode cost does not depend on prompt content, so one prefill
            // is shared by every stream
            let (cache, _) = prefill(model, &tokens(seq))?;
            let mut caches: Vec<DecodeCaches> = vec![cache; batch];
            let next = tokens((WARMUP + steps) * batch);
            for i in 0..WARMUP + steps {
                let t0 = Instant::now();
                for (b, c) in caches.iter_mut().enumerate() {
                    std::hint::black_box(decode_step(model, c, next[i * batch + b])?);
                }
                time(
                    i,
                    t0.elapsed().as_secs_f64() * 1e3,
                    &mut samples,
                    tokens_per_iter,
                );
            }
        }
        BenchMode::Train => {
            tokens_per_iter = batch * seq;
            let mut m = model.clone();
            let mut adam = Adam::new(AdamConfig::default());
            let inputs = tokens(batch * seq);
            let targets = tokens(batch * seq);
            for i in 0..WARMUP + steps {
                let t0 = Instant::now();
                m.zero_grad();
                let loss = m.loss_and_grad(&inputs, &targets, batch, seq)?;
                adam.step(m.params_mut());
                time(
                    i,
                    t0.elapsed().as_secs_f64() * 1e3,
                    &mut samples,
                    tokens_per_iter,
                );
                if i >= WARMUP {
                    losses.push(loss);
                }
            }
        }
    }
    Ok(BenchResult {
        mode,
        batch,
        seq,
        tokens_per_iter,
        median_tokens_per_sec: median(&samples),
        samples,
        total_wall_ms: total_ms,
        loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
    })
}

/// Median-of-runs throughput as a metrics row.
pub fn benchmark_throughput(
    model: &EchoModel,
    mode: BenchMode,
    batch: usize,
    seq: usize,
    steps: usize,
) -> Result<MetricsRow> {
    Ok(benchmark(model, mode, batch, seq, steps)?.to_row("bench", None))
}

/// FLOPs per token: `6 * trainable parameters` when training, `2 * all
/// parameters` for inference.
pub fn flops_per_token(model: &EchoModel, training: bool) -> f64 {
    if training {
        6.0 * model.trainable_param_count() as f64
    } else {
        2.0 * model.param_count() as f64
    }
}

pub fn mfu_percent(flops_per_token: f64, tokens_per_sec: f64, peak_flops_per_sec: f64) -> f64 {
    100.0 * flops_per_token * tokens_per_sec / peak_flops_per_sec
}

/// Model FLOPs utilisation against a user-supplied device peak.
pub fn compute_mfu(
    tokens_per_sec: f64,
    model: &EchoModel,
    peak_flops_per_sec: Option<f64>,
    training: bool,
) -> Result<f64> {
    let peak = match peak_flops_per_sec {
        Some(p) if p > 0.0 && p.is_finite() => p,
        Some(p) => {
            return Err(EchoError::Config(format!(
                "peak FLOPs/sec must be positive, got {p}"
            )))
        }
        None => {
            return Err(EchoError::Config(
                "MFU needs the device peak; pass --peak-flops <FLOPs per second>".into(),
            ))
        }
    };
    Ok(mfu_percent(
        flops_per_token(model, training),
        tokens_per_sec,
        peak,
    ))
}
