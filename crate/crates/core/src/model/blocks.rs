//! Decoder blocks and the global KV projector.
//!
//! Every block follows the pre-norm residual layout
//! `x' = attn(norm(x)) + x; out = ffn(norm(x')) + x'`. Self-attention blocks
//! own their key/value projections; cross-decoder blocks only own a query and
//! output projection and attend over the shared keys/values produced by
//! [`GlobalKvProjector`] from the output of the last self-attention layer.

use super::config::ModelConfig;
use crate::error::{EchoError, Result};
use crate::tensor::kernels::AttnShape;
use crate::tensor::{Parameter, Tape, Tensor, Var};

/// Row layout of a batched sequence: `batch * seq` rows, row `b*seq + t`
/// sits at absolute position `positions[b*seq + t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq: usize,
    pub positions: Vec<usize>,
}

impl SeqLayout {
    /// Positions `0..seq` for every batch row.
    pub fn contiguous(batch: usize, seq: usize) -> Self {
        let positions = (0..batch).flat_map(|_| 0..seq).collect();
        Self {
            batch,
            seq,
            positions,
        }
    }

    /// A single sequence at arbitrary positions.
    pub fn single(positions: &[usize]) -> Self {
        Self {
            batch: 1,
            seq: positions.len(),
            positions: positions.to_vec(),
        }
    }

    fn causal_shape(&self, heads: usize) -> AttnShape {
        AttnShape {
            batch: self.batch,
            q_len: self.seq,
            k_len: self.seq,
            heads,
            q_offset: 0,
        }
    }

    pub(crate) fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.seq > cfg.max_seq {
            return Err(EchoError::SequenceLength {
                len: self.seq,
                max: cfg.max_seq,
            });
        }
        if let Some(&p) = self.positions.iter().max() {
            if p >= cfg.max_seq {
                return Err(EchoError::SequenceLength {
                    len: p + 1,
                    max: cfg.max_seq,
                });
            }
        }
        Ok(())
    }
}

/// SiLU-gated feed-forward: `W_down(silu(x W_gate + b_gate) * (x W_up + b_up)) + b_down`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub w_gate: Parameter,
    pub b_gate: Parameter,
    pub w_up: Parameter,
    pub b_up: Parameter,
    pub w_down: Parameter,
    pub b_down: Parameter,
}

impl Ffn {
    pub fn params(&self) -> [&Parameter; 6] {
        [
            &self.w_gate,
            &self.b_gate,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 6] {
        [
            &mut self.w_gate,
            &mut self.b_gate,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
        ]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let wg = tape.param(&self.w_gate);
        let bg = tape.param(&self.b_gate);
        let gate = tape.matmul(x, wg)?;
        let gate = tape.add_bias(gate, bg)?;
        let gate = tape.silu(gate)?;
        let wu = tape.param(&self.w_up);
        let bu = tape.param(&self.b_up);
        let up = tape.matmul(x, wu)?;
        let up = tape.add_bias(up, bu)?;
        let h = tape.mul(gate, up)?;
        let wd = tape.param(&self.w_down);
        let bd = tape.param(&self.b_down);
        let out = tape.matmul(h, wd)?;
        tape.add_bias(out, bd)
    }

    /// Tape-free evaluation on a `[rows x d]` tensor.
    pub fn forward_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}

/// Tensors produced by a self-attention block that a decode cache keeps.
pub struct SelfAttnOutput {
    pub out: Var,
    /// Rotated keys, `[rows x d]`.
    pub k: Var,
    pub v: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttnBlock {
    /// 1-based layer index.
    pub layer: usize,
    pub w_q: Parameter,
    pub w_k: Parameter,
    pub w_v: Parameter,
    pub w_o: Parameter,
    pub attn_norm: Parameter,
    pub ffn_norm: Parameter,
    pub ffn: Ffn,
}

impl SelfAttnBlock {
    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.attn_norm,
            &self.ffn_norm,
        ];
        v.extend(self.ffn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.attn_norm,
            &mut self.ffn_norm,
        ];
        v.extend(self.ffn.params_mut());
        v
    }

    pub fn forward(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape,
        x: Var,
        layout: &SeqLayout,
    ) -> Result<SelfAttnOutput> {
        let g = tape.param(&self.attn_norm);
        let h = tape.rms_norm(x, g, cfg.eps)?;
        let wq = tape.param(&self.w_q);
        let wk = tape.param(&self.w_k);
        let wv = tape.param(&self.w_v);
        let q = tape.matmul(h, wq)?;
        let q = tape.rope(q, cfg.n_heads, &layout.positions, cfg.rope_base)?;
        let k = tape.matmul(h, wk)?;
        let k = tape.rope(k, cfg.n_heads, &layout.positions, cfg.rope_base)?;
        let v = tape.matmul(h, wv)?;
        let a = tape.attention(q, k, v, layout.causal_shape(cfg.n_heads))?;
        let out = residual_tail(cfg, tape, x, a, &self.w_o, &self.ffn_norm, &self.ffn)?;
        Ok(SelfAttnOutput { out, k, v })
    }

    /// Tape-free forward of a single sequence `x: [T x d]` at `positions`.
    pub fn forward_tensor(
        &self,
        cfg: &ModelConfig,
        x: &Tensor,
        positions: &[usize],
    ) -> Result<Tensor> {
        let layout = SeqLayout::single(positions);
        layout.check(cfg)?;
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let out = self.forward(cfg, &mut tape, xv, &layout)?.out;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossDecoderBlock {
    /// 1-based layer index.
    pub layer: usize,
    pub w_q: Parameter,
    pub w_o: Parameter,
    pub attn_norm: Parameter,
    pub ffn_norm: Parameter,
    pub ffn: Ffn,
}

impl CrossDecoderBlock {
    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.w_q, &self.w_o, &self.attn_norm, &self.ffn_norm];
        v.extend(self.ffn.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![
            &mut self.w_q,
            &mut self.w_o,
            &mut self.attn_norm,
            &mut self.ffn_norm,
        ];
        v.extend(self.ffn.params_mut());
        v
    }

    /// Queries come from this block's own input; keys/values are the shared
    /// ones, attended causally.
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape,
        x: Var,
        k_shared: Var,
        v_shared: Var,
        layout: &SeqLayout,
    ) -> Result<Var> {
        let g = tape.param(&self.attn_norm);
        let h = tape.rms_norm(x, g, cfg.eps)?;
        let wq = tape.param(&self.w_q);
        let q = tape.matmul(h, wq)?;
        let q = tape.rope(q, cfg.n_heads, &layout.positions, cfg.rope_base)?;
        let k_rows = tape.value(k_shared).rows();
        if k_rows != layout.batch * layout.seq {
            return Err(EchoError::CacheCoverage {
                keys: k_rows / layout.batch.max(1),
                needed: layout.seq,
            });
        }
        let a = tape.attention(q, k_shared, v_shared, layout.causal_shape(cfg.n_heads))?;
        residual_tail(cfg, tape, x, a, &self.w_o, &self.ffn_norm, &self.ffn)
    }

    pub fn forward_tensor(
        &self,
        cfg: &ModelConfig,
        x: &Tensor,
        k_shared: &Tensor,
        v_shared: &Tensor,
        positions: &[usize],
    ) -> Result<Tensor> {
        let layout = SeqLayout::single(positions);
        layout.check(cfg)?;
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let k = tape.constant(k_shared.clone());
        let v = tape.constant(v_shared.clone());
        let out = self.forward(cfg, &mut tape, xv, k, v, &layout)?;
        Ok(tape.value(out).clone())
    }
}

/// `x' = a W_o + x; out = ffn(norm(x')) + x'`.
fn residual_tail(
    cfg: &ModelConfig,
    tape: &mut Tape,
    x: Var,
    attn: Var,
    w_o: &Parameter,
    ffn_norm: &Parameter,
    ffn: &Ffn,
) -> Result<Var> {
    let wo = tape.param(w_o);
    let proj = tape.matmul(attn, wo)?;
    let x1 = tape.add(proj, x)?;
    let g = tape.param(ffn_norm);
    let h = tape.rms_norm(x1, g, cfg.eps)?;
    let f = ffn.forward(tape, h)?;
    tape.add(f, x1)
}

/// Maps the output of the last self-attention layer to the keys and values
/// shared by every cross-decoder: `K = rope(norm(X W_k))`, `V = norm(X W_v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalKvProjector {
    pub w_k: Parameter,
    pub w_v: Parameter,
    pub k_norm: Parameter,
    pub v_norm: Parameter,
}

impl GlobalKvProjector {
    pub fn params(&self) -> [&Parameter; 4] {
        [&self.w_k, &self.w_v, &self.k_norm, &self.v_norm]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [
            &mut self.w_k,
            &mut self.w_v,
            &mut self.k_norm,
            &mut self.v_norm,
        ]
    }

    pub fn forward(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape,
        x_n: Var,
        layout: &SeqLayout,
    ) -> Result<(Var, Var)> {
        let wk = tape.param(&self.w_k);
        let gk = tape.param(&self.k_norm);
        let k = tape.matmul(x_n, wk)?;
        let k = tape.rms_norm(k, gk, cfg.eps)?;
        let k = tape.rope(k, cfg.n_heads, &layout.positions, cfg.rope_base)?;
        let wv = tape.param(&self.w_v);
        let gv = tape.param(&self.v_norm);
        let v = tape.matmul(x_n, wv)?;
        let v = tape.rms_norm(v, gv, cfg.eps)?;
        Ok((k, v))
    }

    /// Tape-free shared KV for one sequence.
    pub fn compute_shared_kv(
        &self,
        cfg: &ModelConfig,
        x_n: &Tensor,
        positions: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        let layout = SeqLayout::single(positions);
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x_n.clone());
        let (k, v) = self.forward(cfg, &mut tape, xv, &layout)?;
        Ok((tape.value(k).clone(), tape.value(v).clone()))
    }
}
