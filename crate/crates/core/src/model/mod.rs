//! The shared-KV decoder stack.
//!
//! Layers `1..=N` are ordinary self-attention blocks. When `N < L`, the output
//! of layer `N` is projected once into a shared key/value pair that every
//! remaining layer `N+1..=L` attends to through its own queries.

pub mod blocks;
pub mod config;

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use blocks::{CrossDecoderBlock, Ffn, GlobalKvProjector, SelfAttnBlock, SeqLayout};
pub use config::ModelConfig;

use crate::error::{EchoError, Result};
use crate::tensor::{Gradients, Parameter, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EchoModel {
    pub config: ModelConfig,
    pub token_embedding: Parameter,
    pub blocks_self: Vec<SelfAttnBlock>,
    pub global_kv: Option<GlobalKvProjector>,
    pub blocks_cross: Vec<CrossDecoderBlock>,
    pub final_norm: Parameter,
    pub lm_head: Parameter,
}

/// Handles into a recorded forward pass.
pub struct ForwardVars {
    /// `[batch*seq x vocab]`
    pub logits: Var,
    /// Rotated keys and values of each self-attention layer.
    pub self_kv: Vec<(Var, Var)>,
    /// Shared keys and values, present when the model has cross-decoders.
    pub shared_kv: Option<(Var, Var)>,
    /// Output of the last self-attention layer.
    pub x_n: Var,
}

/// Deterministic parameter initialiser: each parameter draws from its own
/// stream derived from the model seed and the parameter name, so a given
/// name always receives the same values for a given seed.
struct Init {
    seed: u64,
    std: f64,
}

impl Init {
    fn normal(&self, name: String, shape: &[usize]) -> Parameter {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let n: usize = shape.iter().product();
        let data = if self.std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, self.std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        Parameter::new(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    fn ones(name: String, n: usize) -> Parameter {
        Parameter::new(name, Tensor::filled(&[n], 1.0))
    }

    fn zeros(name: String, n: usize) -> Parameter {
        Parameter::new(name, Tensor::zeros(&[n]))
    }

    fn ffn(&self, cfg: &ModelConfig, layer: usize) -> Ffn {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        Ffn {
            w_gate: self.normal(format!("layer.{layer}.ffn.w_gate"), &[d, f]),
            b_gate: Self::zeros(format!("layer.{layer}.ffn.b_gate"), f),
            w_up: self.normal(format!("layer.{layer}.ffn.w_up"), &[d, f]),
            b_up: Self::zeros(format!("layer.{layer}.ffn.b_up"), f),
            w_down: self.normal(format!("layer.{layer}.ffn.w_down"), &[f, d]),
            b_down: Self::zeros(format!("layer.{layer}.ffn.b_down"), d),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl EchoModel {
    /// Builds a model with weights drawn from `Normal(0, init_std)` seeded by
    /// `config.seed`; norm gains start at one and biases at zero.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let init = Init {
            seed: config.seed,
            std: config.init_std,
        };
        let d = config.d_model;
        let sq = [d, d];
        let blocks_self = (1..=config.n_self_layers)
            .map(|l| SelfAttnBlock {
                layer: l,
                w_q: init.normal(format!("layer.{l}.attn.w_q"), &sq),
                w_k: init.normal(format!("layer.{l}.attn.w_k"), &sq),
                w_v: init.normal(format!("layer.{l}.attn.w_v"), &sq),
                w_o: init.normal(format!("layer.{l}.attn.w_o"), &sq),
                attn_norm: Init::ones(format!("layer.{l}.attn_norm"), d),
                ffn_norm: Init::ones(format!("layer.{l}.ffn_norm"), d),
                ffn: init.ffn(&config, l),
            })
            .collect();
        let blocks_cross = (config.n_self_layers + 1..=config.n_layers)
            .map(|l| CrossDecoderBlock {
                layer: l,
                w_q: init.normal(format!("layer.{l}.attn.w_q"), &sq),
                w_o: init.normal(format!("layer.{l}.attn.w_o"), &sq),
                attn_norm: Init::ones(format!("layer.{l}.attn_norm"), d),
                ffn_norm: Init::ones(format!("layer.{l}.ffn_norm"), d),
                ffn: init.ffn(&config, l),
            })
            .collect();
        let global_kv = (!config.is_baseline()).then(|| GlobalKvProjector {
            w_k: init.normal("global_kv.w_k".into(), &sq),
            w_v: init.normal("global_kv.w_v".into(), &sq),
            k_norm: Init::ones("global_kv.k_norm".into(), d),
            v_norm: Init::ones("global_kv.v_norm".into(), d),
        });
        Ok(Self {
            token_embedding: init.normal("embed.tokens".into(), &[config.vocab_size, d]),
            final_norm: Init::ones("final_norm".into(), d),
            lm_head: init.normal("lm_head".into(), &[d, config.vocab_size]),
            config,
            blocks_self,
            global_kv,
            blocks_cross,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Current number of self-attention layers.
    pub fn n_self_layers(&self) -> usize {
        self.blocks_self.len()
    }

    pub fn is_baseline(&self) -> bool {
        self.blocks_cross.is_empty()
    }

    /// All parameters in a fixed order: embedding, layers 1..L, projector,
    /// final norm, head.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.token_embedding];
        for b in &self.blocks_self {
            v.extend(b.params());
        }
        for b in &self.blocks_cross {
            v.extend(b.params());
        }
        if let Some(g) = &self.global_kv {
            v.extend(g.params());
        }
        v.push(&self.final_norm);
        v.push(&self.lm_head);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.token_embedding];
        for b in &mut self.blocks_self {
            v.extend(b.params_mut());
        }
        for b in &mut self.blocks_cross {
            v.extend(b.params_mut());
        }
        if let Some(g) = &mut self.global_kv {
            v.extend(g.params_mut());
        }
        v.push(&mut self.final_norm);
        v.push(&mut self.lm_head);
        v
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params_mut().into_iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.numel())
            .sum()
    }

    /// Names of every parameter belonging to layer `layer` (1-based).
    pub fn layer_param_names(&self, layer: usize) -> Vec<String> {
        let prefix = format!("layer.{layer}.");
        self.params()
            .into_iter()
            .filter(|p| p.name.starts_with(&prefix))
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn global_kv_param_names(&self) -> Vec<String> {
        self.global_kv
            .iter()
            .flat_map(|g| g.params())
            .map(|p| p.name.clone())
            .collect()
    }

    /// Freezes every parameter except the named ones.
    pub fn freeze_all_except(&mut self, names: &HashSet<String>) -> Result<()> {
        let known: HashSet<&str> = self.params().iter().map(|p| p.name.as_str()).collect();
        if let Some(missing) = names.iter().find(|n| !known.contains(n.as_str())) {
            return Err(EchoError::UnknownParameter(missing.clone()));
        }
        for p in self.params_mut() {
            p.frozen = !names.contains(&p.name);
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.params_mut() {
            p.frozen = false;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds the parameter gradients from `grads` into each non-frozen parameter.
    pub fn accumulate_grads(&mut self, grads: &Gradients) {
        for p in self.params_mut() {
            if let Some(g) = grads.param(&p.name) {
                p.accumulate(g);
            }
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().position(|&t| t >= vocab) {
            Some(index) => Err(EchoError::Vocab {
                id: tokens[index],
                index,
                vocab,
            }),
            None => Ok(()),
        }
    }

    /// Records the full forward pass of `batch` sequences of length `seq`
    /// (row-major in `tokens`) on `tape`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<ForwardVars> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(EchoError::Dimension {
                op: "model_forward",
                lhs: vec![batch, seq],
                rhs: vec![tokens.len()],
            });
        }
        self.check_tokens(tokens)?;
        let layout = SeqLayout::contiguous(batch, seq);
        layout.check(&self.config)?;
        let cfg = &self.config;
        let table = tape.param(&self.token_embedding);
        let mut x = tape.embedding(table, tokens)?;
        let mut self_kv = Vec::with_capacity(self.blocks_self.len());
        for block in &self.blocks_self {
            let o = block.forward(cfg, tape, x, &layout)?;
            self_kv.push((o.k, o.v));
            x = o.out;
        }
        let x_n = x;
        let shared_kv = match &self.global_kv {
            Some(g) if !self.blocks_cross.is_empty() => Some(g.forward(cfg, tape, x_n, &layout)?),
            _ => None,
        };
        if let Some((k, v)) = shared_kv {
            for block in &self.blocks_cross {
                x = block.forward(cfg, tape, x, k, v, &layout)?;
            }
        }
        let g = tape.param(&self.final_norm);
        let h = tape.rms_norm(x, g, cfg.eps)?;
        let head = tape.param(&self.lm_head);
        let logits = tape.matmul(h, head)?;
        Ok(ForwardVars {
            logits,
            self_kv,
            shared_kv,
            x_n,
        })
    }

    /// Logits `[B x T x vocab]` for a batch of equal-length token sequences.
    pub fn forward(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        if tokens.iter().any(|t| t.len() != seq) {
            return Err(EchoError::Data("ragged token batch".into()));
        }
        let flat: Vec<usize> = tokens.concat();
        let mut tape = Tape::no_grad();
        let out = self.forward_tape(&mut tape, &flat, batch, seq)?;
        tape.value(out.logits)
            .clone()
            .reshape(&[batch, seq, self.config.vocab_size])
    }

    /// Mean cross-entropy of predicting `targets` from `inputs` (both
    /// `batch*seq`, row-major), recorded on `tape`.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let out = self.forward_tape(tape, inputs, batch, seq)?;
        tape.cross_entropy(out.logits, targets)
    }

    /// Runs forward and backward, accumulating gradients into the model's
    /// non-frozen parameters. Returns the loss.
    pub fn loss_and_grad(
        &mut self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_tape(&mut tape, inputs, targets, batch, seq)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        self.accumulate_grads(&grads);
        Ok(value)
    }

    pub fn loss(
        &self,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<f64> {
        let mut tape = Tape::no_grad();
        let loss = self.loss_tape(&mut tape, inputs, targets, batch, seq)?;
        Ok(tape.value(loss).item())
    }

    /// Turns self-attention layer `layer` (1-based) into a cross-decoder.
    ///
    /// Layers must be converted deepest first and the model must keep at
    /// least `ceil(L/2)` self-attention layers. The layer's key/value
    /// projections are dropped; everything else moves over unchanged. The
    /// first conversion creates the global projector from copies of the
    /// converted layer's key/value weights.
    pub fn convert_layer_to_cross_decoder(&mut self, layer: usize) -> Result<()> {
        let current = self.n_self_layers();
        let fail = |reason: String| Err(EchoError::ConversionOrder { layer, reason });
        if layer != current {
            return fail(format!(
                "the deepest remaining self-attention layer is {current}"
            ));
        }
        if 2 * (current - 1) < self.config.n_layers {
            return fail(format!(
                "at least {} self-attention layers must remain",
                self.config.min_self_layers()
            ));
        }
        let block = self.blocks_self.pop().expect("current >= 1");
        if self.global_kv.is_none() {
            let d = self.config.d_model;
            let mut w_k = block.w_k.clone();
            w_k.name = "global_kv.w_k".into();
            w_k.zero_grad();
            let mut w_v = block.w_v.clone();
            w_v.name = "global_kv.w_v".into();
            w_v.zero_grad();
            self.global_kv = Some(GlobalKvProjector {
                w_k,
                w_v,
                k_norm: Init::ones("global_kv.k_norm".into(), d),
                v_norm: Init::ones("global_kv.v_norm".into(), d),
            });
        }
        self.blocks_cross.insert(
            0,
            CrossDecoderBlock {
                layer: block.layer,
                w_q: block.w_q,
                w_o: block.w_o,
                attn_norm: block.attn_norm,
                ffn_norm: block.ffn_norm,
                ffn: block.ffn,
            },
        );
        self.config.n_self_layers = current - 1;
        Ok(())
    }

    /// Converts layers `L, L-1, ..., target+1` in order.
    pub fn convert_down_to(&mut self, target_self_layers: usize) -> Result<()> {
        while self.n_self_layers() > target_self_layers {
            self.convert_layer_to_cross_decoder(self.n_self_layers())?;
        }
        Ok(())
    }
}

/// Tensor-level spec-style entry point; see [`EchoModel::init`].
pub fn init_model(config: ModelConfig) -> Result<EchoModel> {
    EchoModel::init(config)
}
