//! Autoregressive decoding against per-layer and shared KV caches, and the
//! closed-form KV memory model.
//!
//! A model with `N` self-attention layers out of `L` keeps `N` per-layer
//! caches plus, when `N < L`, one shared cache read by every cross-decoder.
//! Each decode step therefore appends `N + 1` key/value rows instead of `L`.

use serde::Serialize;

use crate::error::{EchoError, Result};
use crate::model::{EchoModel, Ffn};
use crate::tensor::kernels::{self, AttnShape};
use crate::tensor::{Parameter, Tape, Tensor};

/// Growing key/value rows for one attention source, `[t x d]` each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvRows {
    k: Vec<f64>,
    v: Vec<f64>,
}

impl KvRows {
    fn with_capacity(elems: usize) -> Self {
        Self {
            k: Vec::with_capacity(elems),
            v: Vec::with_capacity(elems),
        }
    }

    fn push(&mut self, k: &[f64], v: &[f64]) {
        self.k.extend_from_slice(k);
        self.v.extend_from_slice(v);
    }

    pub fn keys(&self) -> &[f64] {
        &self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeCaches {
    d: usize,
    capacity: usize,
    per_layer: Vec<KvRows>,
    shared: Option<KvRows>,
    t_filled: usize,
}

impl DecodeCaches {
    fn new(model: &EchoModel, reserve_rows: usize) -> Self {
        let d = model.config.d_model;
        let elems = reserve_rows.min(model.config.max_seq) * d;
        Self {
            d,
            capacity: model.config.max_seq,
            per_layer: (0..model.n_self_layers())
                .map(|_| KvRows::with_capacity(elems))
                .collect(),
            shared: (!model.is_baseline()).then(|| KvRows::with_capacity(elems)),
            t_filled: 0,
        }
    }

    pub fn t_filled(&self) -> usize {
        self.t_filled
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn per_layer(&self) -> &[KvRows] {
        &self.per_layer
    }

    pub fn shared(&self) -> Option<&KvRows> {
        self.shared.as_ref()
    }

    /// Number of cached rows in each per-layer cache followed by the shared one.
    pub fn row_counts(&self) -> Vec<usize> {
        self.per_layer
            .iter()
            .chain(self.shared.iter())
            .map(|c| c.k.len() / self.d)
            .collect()
    }

    /// Total key/value rows held across all caches.
    pub fn total_rows(&self) -> usize {
        self.row_counts().iter().sum()
    }

    /// Key/value rows appended by one decode step: one per self-attention
    /// layer plus one for the shared cache.
    pub fn rows_per_step(&self) -> usize {
        self.per_layer.len() + usize::from(self.shared.is_some())
    }

    /// Shared keys and values as `[t x d]` tensors.
    pub fn shared_tensors(&self) -> Option<(Tensor, Tensor)> {
        self.shared.as_ref().map(|s| {
            let rows = s.k.len() / self.d;
            (
                Tensor::new(vec![rows, self.d], s.k.clone()).expect("cache shape"),
                Tensor::new(vec![rows, self.d], s.v.clone()).expect("cache shape"),
            )
        })
    }
}

/// Runs the prompt through the full-sequence forward pass, filling every
/// cache and returning logits `[T x vocab]` identical to [`EchoModel::forward`].
pub fn prefill(model: &EchoModel, tokens: &[usize]) -> Result<(DecodeCaches, Tensor)> {
    if tokens.is_empty() {
        return Err(EchoError::Data("prefill needs at least one token".into()));
    }
    let mut tape = Tape::no_grad();
    let out = model.forward_tape(&mut tape, tokens, 1, tokens.len())?;
    let mut caches = DecodeCaches::new(model, tokens.len() * 2);
    for (cache, (k, v)) in caches.per_layer.iter_mut().zip(&out.self_kv) {
        cache.push(tape.value(*k).data(), tape.value(*v).data());
    }
    if let (Some(cache), Some((k, v))) = (caches.shared.as_mut(), out.shared_kv) {
        cache.push(tape.value(k).data(), tape.value(v).data());
    }
    caches.t_filled = tokens.len();
    let logits = tape.value(out.logits).clone();
    Ok((caches, logits))
}

fn linear(x: &[f64], w: &Parameter) -> Vec<f64> {
    let n = w.value.shape()[1];
    let mut out = vec![0.0; n];
    kernels::vecmat(x, w.value.data(), n, &mut out);
    out
}

fn norm(x: &[f64], gamma: &Parameter, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut inv = [0.0];
    kernels::rms_norm_rows(x, x.len(), gamma.value.data(), eps, &mut out, &mut inv);
    out
}

fn add_into(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

fn ffn_row(ffn: &Ffn, x: &[f64]) -> Vec<f64> {
    let mut gate = linear(x, &ffn.w_gate);
    add_into(&mut gate, ffn.b_gate.value.data());
    let mut up = linear(x, &ffn.w_up);
    add_into(&mut up, ffn.b_up.value.data());
    for (g, u) in gate.iter_mut().zip(&up) {
        *g = kernels::silu(*g) * u;
    }
    let mut out = linear(&gate, &ffn.w_down);
    add_into(&mut out, ffn.b_down.value.data());
    out
}

/// Pre-norm residual tail shared by both block kinds: `x + a W_o`, then the
/// feed-forward residual.
fn residual_tail(
    x: &mut [f64],
    attn: &[f64],
    w_o: &Parameter,
    ffn_norm: &Parameter,
    ffn: &Ffn,
    eps: f64,
) {
    add_into(x, &linear(attn, w_o));
    let f = ffn_row(ffn, &norm(x, ffn_norm, eps));
    add_into(x, &f);
}

/// Appends one token to every cache and returns its next-token logits.
pub fn decode_step(model: &EchoModel, caches: &mut DecodeCaches, token: usize) -> Result<Tensor> {
    let cfg = &model.config;
    if caches.t_filled == 0 {
        return Err(EchoError::Data(
            "decode_step requires a prefilled cache".into(),
        ));
    }
    if caches.t_filled >= caches.capacity {
        return Err(EchoError::Capacity {
            capacity: caches.capacity,
        });
    }
    if token >= cfg.vocab_size {
        return Err(EchoError::Vocab {
            id: token,
            index: 0,
            vocab: cfg.vocab_size,
        });
    }
    if caches.per_layer.len() != model.n_self_layers()
        || caches.shared.is_some() == model.is_baseline()
    {
        return Err(EchoError::Data(
            "cache layout does not match the model".into(),
        ));
    }
    let d = cfg.d_model;
    let pos = caches.t_filled;
    let inv_freq = kernels::rope_inv_freq(cfg.head_dim(), cfg.rope_base);
    let shape = AttnShape {
        batch: 1,
        q_len: 1,
        k_len: pos + 1,
        heads: cfg.n_heads,
        q_offset: pos,
    };
    let mut attn = vec![0.0; d];
    let mut x = model.token_embedding.value.row(token).to_vec();

    for (block, cache) in model.blocks_self.iter().zip(caches.per_layer.iter_mut()) {
        let h = norm(&x, &block.attn_norm, cfg.eps);
        let mut q = linear(&h, &block.w_q);
        let mut k = linear(&h, &block.w_k);
        let v = linear(&h, &block.w_v);
        kernels::rope_rows(&mut q, d, cfg.n_heads, &[pos], &inv_freq, false);
        kernels::rope_rows(&mut k, d, cfg.n_heads, &[pos], &inv_freq, false);
        cache.push(&k, &v);
        kernels::attention_forward(&q, &cache.k, &cache.v, d, shape, &mut attn, None);
        residual_tail(
            &mut x,
            &attn,
            &block.w_o,
            &block.ffn_norm,
            &block.ffn,
            cfg.eps,
        );
    }

    if let (Some(proj), Some(shared)) = (&model.global_kv, caches.shared.as_mut()) {
        let mut k = norm(&linear(&x, &proj.w_k), &proj.k_norm, cfg.eps);
        kernels::rope_rows(&mut k, d, cfg.n_heads, &[pos], &inv_freq, false);
        let v = norm(&linear(&x, &proj.w_v), &proj.v_norm, cfg.eps);
        shared.push(&k, &v);
        for block in &model.blocks_cross {
            let h = norm(&x, &block.attn_norm, cfg.eps);
            let mut q = linear(&h, &block.w_q);
            kernels::rope_rows(&mut q, d, cfg.n_heads, &[pos], &inv_freq, false);
            kernels::attention_forward(&q, &shared.k, &shared.v, d, shape, &mut attn, None);
            residual_tail(
                &mut x,
                &attn,
                &block.w_o,
                &block.ffn_norm,
                &block.ffn,
                cfg.eps,
            );
        }
    }

    let h = norm(&x, &model.final_norm, cfg.eps);
    let logits = Tensor::new(vec![cfg.vocab_size], linear(&h, &model.lm_head))?;
    logits.check_finite("decode_step")?;
    caches.t_filled += 1;
    Ok(logits)
}

/// Exact ratio `num / den`, reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// KV projection-weight and runtime-cache memory of a model versus the
/// all-self-attention baseline of the same depth.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemoryReport {
    pub layers: usize,
    pub self_layers: usize,
    pub shared_fraction: f64,
    pub batch: usize,
    pub seq: usize,
    pub bytes_per_scalar: usize,
    pub baseline_kv_param_bytes: u64,
    pub echo_kv_param_bytes: u64,
    pub param_ratio: f64,
    pub baseline_cache_bytes: u64,
    pub echo_cache_bytes: u64,
    pub cache_ratio: f64,
    #[serde(skip)]
    pub param_ratio_exact: Ratio,
    #[serde(skip)]
    pub cache_ratio_exact: Ratio,
}

/// Number of key/value pairs a model of this shape stores per position:
/// `L` for the baseline, `N + 1` once any layer reads the shared KV.
pub fn kv_pairs(layers: usize, self_layers: usize) -> usize {
    if self_layers >= layers {
        layers
    } else {
        self_layers + 1
    }
}

pub fn kv_memory_report(
    config: &crate::model::ModelConfig,
    batch: usize,
    seq: usize,
    bytes_per_scalar: usize,
) -> Result<MemoryReport> {
    if batch == 0 || seq == 0 || bytes_per_scalar == 0 {
        return Err(EchoError::Config(
            "batch, seq and bytes_per_scalar must be positive".into(),
        ));
    }
    config.validate()?;
    let d = config.d_model as u64;
    let (l, n) = (config.n_layers, config.n_self_layers);
    let bytes = bytes_per_scalar as u64;
    let base_pairs = kv_pairs(l, l) as u64;
    let echo_pairs = kv_pairs(l, n) as u64;
    let per_pair_params = 2 * d * d * bytes;
    let per_pair_cache = 2 * batch as u64 * seq as u64 * d * bytes;
    let baseline_kv_param_bytes = base_pairs * per_pair_params;
    let echo_kv_param_bytes = echo_pairs * per_pair_params;
    let baseline_cache_bytes = base_pairs * per_pair_cache;
    let echo_cache_bytes = echo_pairs * per_pair_cache;
    let param_ratio_exact = Ratio::new(echo_kv_param_bytes, baseline_kv_param_bytes);
    let cache_ratio_exact = Ratio::new(echo_cache_bytes, baseline_cache_bytes);
    Ok(MemoryReport {
        layers: l,
        self_layers: n,
        shared_fraction: config.shared_fraction(),
        batch,
        seq,
        bytes_per_scalar,
        baseline_kv_param_bytes,
        echo_kv_param_bytes,
        param_ratio: param_ratio_exact.to_f64(),
        baseline_cache_bytes,
        echo_cache_bytes,
        cache_ratio: cache_ratio_exact.to_f64(),
        param_ratio_exact,
        cache_ratio_exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(l: usize, n: usize) -> ModelConfig {
        ModelConfig::tiny(8, 2, l, 16).with_self_layers(n)
    }

    #[test]
    fn half_shared_twelve_layers() {
        let r = kv_memory_report(&cfg(12, 6), 1, 128, 2).unwrap();
        assert_eq!(r.param_ratio_exact, Ratio::new(7, 12));
        assert_eq!(r.cache_ratio, 7.0 / 12.0);
        assert!((r.cache_ratio - 0.58333).abs() < 1e-5);
    }

    #[test]
    fn unshared_model_has_ratio_one() {
        let r = kv_memory_report(&cfg(12, 12), 2, 64, 4).unwrap();
        assert_eq!(r.param_ratio, 1.0);
        assert_eq!(r.cache_ratio, 1.0);
    }

    #[test]
    fn large_depth_approaches_one_minus_p() {
        let c = ModelConfig {
            n_layers: 1_000_000,
            n_self_layers: 500_000,
            ..cfg(4, 4)
        };
        let r = kv_memory_report(&c, 1, 1, 1).unwrap();
        assert_eq!(r.param_ratio, 0.500001);
        assert!((r.param_ratio - 0.5).abs() <= 1.0 / 1_000_000.0 + 1e-15);
    }

    #[test]
    fn byte_counts_follow_pair_counts() {
        let r = kv_memory_report(&cfg(4, 2), 3, 5, 8).unwrap();
        assert_eq!(r.baseline_kv_param_bytes, 4 * 2 * 64 * 8);
        assert_eq!(r.echo_kv_param_bytes, 3 * 2 * 64 * 8);
        assert_eq!(r.baseline_cache_bytes, 4 * 2 * 3 * 5 * 8 * 8);
        assert_eq!(r.echo_cache_bytes, 3 * 2 * 3 * 5 * 8 * 8);
    }

    #[test]
    fn zero_inputs_are_rejected() {
        assert!(kv_memory_report(&cfg(4, 2), 0, 5, 8).is_err());
    }

    #[test]
    fn cache_bytes_strictly_decrease_with_fewer_self_layers() {
        let l = 22;
        let bytes = |n| {
            kv_memory_report(&cfg(l, n), 1, 16, 2)
                .unwrap()
                .echo_cache_bytes
        };
        let shared: Vec<u64> = (11..l).map(bytes).collect();
        assert!(shared.windows(2).all(|w| w[0] < w[1]));
        // one converted layer trades its own pair for the shared one
        assert_eq!(bytes(l - 1), bytes(l));
    }

    #[test]
    fn decode_requires_prefill_and_respects_capacity() {
        let mut c = ModelConfig::tiny(8, 2, 2, 16).with_self_layers(1);
        c.max_seq = 3;
        let model = EchoModel::init(c).unwrap();
        let (mut caches, _) = prefill(&model, &[1, 2]).unwrap();
        decode_step(&model, &mut caches, 3).unwrap();
        let err = decode_step(&model, &mut caches, 4).unwrap_err();
        assert!(matches!(err, EchoError::Capacity { capacity: 3 }));
        assert!(prefill(&model, &[]).is_err());
    }

    #[test]
    fn prefill_bookkeeping() {
        let model = EchoModel::init(ModelConfig::tiny(8, 2, 4, 16).with_self_layers(2)).unwrap();
        let (caches, logits) = prefill(&model, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(caches.t_filled(), 5);
        assert_eq!(caches.per_layer().len(), 2);
        assert_eq!(caches.row_counts(), vec![5, 5, 5]);
        assert_eq!(logits.shape(), &[5, 16]);
    }
}
