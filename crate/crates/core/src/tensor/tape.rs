//! Reverse-mode differentiation over a linear tape.
//!
//! Each forward call records its operations on a fresh [`Tape`]. Parameters
//! enter the tape as named leaves; `backward` walks the tape once in reverse
//! and returns gradients keyed both by [`Var`] and by parameter name. A tape
//! can only be differentiated once.

use std::collections::HashMap;

use super::kernels::{self, AttnShape, Trans};
use super::{Parameter, Tensor};
use crate::error::{EchoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        inv_rms: Vec<f64>,
    },
    Rope {
        x: Var,
        heads: usize,
        positions: Vec<usize>,
        inv_freq: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that is differentiated iff `requires_grad` (and the tape records grads).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a parameter leaf. Frozen parameters never require grad.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let v = self.leaf(p.value.clone(), !p.frozen);
        self.nodes[v.0].param = Some(p.name.clone());
        v
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for (index, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(EchoError::Vocab { id, index, vocab });
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = super::ops::matmul(av, bv)?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(EchoError::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a vector over the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.shape() != [xv.cols()] {
            return Err(EchoError::Dimension {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut value = xv.clone();
        let cols = value.cols();
        for row in value.data_mut().chunks_exact_mut(cols) {
            for (r, b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        self.push(value, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = super::ops::silu(self.value(x))?;
        self.push(value, Op::Silu(x), &[x], "silu")
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gamma));
        if gv.shape() != [xv.cols()] {
            return Err(EchoError::Dimension {
                op: "rms_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut value = Tensor::zeros(xv.shape());
        let mut inv_rms = vec![0.0; xv.rows()];
        kernels::rms_norm_rows(
            xv.data(),
            xv.cols(),
            gv.data(),
            eps,
            value.data_mut(),
            &mut inv_rms,
        );
        self.push(
            value,
            Op::RmsNorm { x, gamma, inv_rms },
            &[x, gamma],
            "rms_norm",
        )
    }

    /// Rotary embedding over `heads` equal slices of each row; `positions[r]`
    /// is the absolute position of row `r`.
    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let xv = self.value(x);
        if positions.len() != xv.rows()
            || !xv.cols().is_multiple_of(heads)
            || !(xv.cols() / heads).is_multiple_of(2)
        {
            return Err(EchoError::Dimension {
                op: "rope",
                lhs: xv.shape().to_vec(),
                rhs: vec![positions.len(), heads],
            });
        }
        let inv_freq = kernels::rope_inv_freq(xv.cols() / heads, base);
        let mut value = xv.clone();
        let cols = value.cols();
        kernels::rope_rows(value.data_mut(), cols, heads, positions, &inv_freq, false);
        let op = Op::Rope {
            x,
            heads,
            positions: positions.to_vec(),
            inv_freq,
        };
        self.push(value, op, &[x], "rope")
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if qv.rows() != shape.batch * shape.q_len
            || kv.rows() != shape.batch * shape.k_len
            || kv.shape() != vv.shape()
            || kv.cols() != d
            || d % shape.heads != 0
        {
            return Err(EchoError::Dimension {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: kv.shape().to_vec(),
            });
        }
        if shape.q_offset + shape.q_len > shape.k_len {
            return Err(EchoError::CacheCoverage {
                keys: shape.k_len,
                needed: shape.q_offset + shape.q_len,
            });
        }
        let mut out = vec![0.0; qv.len()];
        let track = self.grad_enabled && [q, k, v].iter().any(|x| self.nodes[x.0].requires_grad);
        let mut probs = if track {
            vec![0.0; shape.batch * shape.heads * shape.q_len * shape.k_len]
        } else {
            Vec::new()
        };
        kernels::attention_forward(
            qv.data(),
            kv.data(),
            vv.data(),
            d,
            shape,
            &mut out,
            track.then_some(probs.as_mut_slice()),
        );
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Mean next-token negative log-likelihood over all rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(EchoError::Dimension {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (index, (row, &t)) in probs.chunks_exact_mut(vocab).zip(targets).enumerate() {
            if t >= vocab {
                return Err(EchoError::Vocab {
                    id: t,
                    index,
                    vocab,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let value = Tensor::scalar(total / rows as f64);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    /// Differentiates the scalar `root` with respect to every leaf that
    /// requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(EchoError::StaleGraph);
        }
        let root_shape = self.value(root).shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(EchoError::NonScalarRoot(root_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::filled(&root_shape, 1.0));
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut by_param = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Some(name), Some(g)) = (&node.param, &grads[i]) {
                by_param.insert(name.clone(), g.clone());
            }
        }
        Ok(Gradients {
            by_var: grads,
            by_param,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Reshape(x) => {
                let shaped = g.clone().reshape(val(*x).shape()).expect("reshape grad");
                accumulate(grads, *x, shaped);
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let t = val(*table);
                    let d = t.cols();
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, b) in dt.data_mut()[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    kernels::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        Trans::No,
                        bv.data(),
                        Trans::Yes,
                        da.data_mut(),
                        false,
                    );
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    kernels::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        Trans::Yes,
                        g.data(),
                        Trans::No,
                        db.data_mut(),
                        false,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if needs(this) {
                        let mut d = g.clone();
                        for (x, y) in d.data_mut().iter_mut().zip(val(other).data()) {
                            *x *= y;
                        }
                        accumulate(grads, this, d);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if needs(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if needs(*bias) {
                    let cols = g.cols();
                    let mut db = Tensor::zeros(&[cols]);
                    for row in g.data().chunks_exact(cols) {
                        for (a, b) in db.data_mut().iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Silu(x) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(val(*x).data()) {
                    *dv *= kernels::silu_grad(xv);
                }
                accumulate(grads, *x, d);
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let cols = xv.cols();
                if needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    for (r, ((xr, gr), dr)) in xv
                        .data()
                        .chunks_exact(cols)
                        .zip(g.data().chunks_exact(cols))
                        .zip(dx.data_mut().chunks_exact_mut(cols))
                        .enumerate()
                    {
                        let inv = inv_rms[r];
                        let dot: f64 = (0..cols).map(|j| gv.data()[j] * gr[j] * xr[j]).sum();
                        let coef = inv * inv * inv * dot / cols as f64;
                        for j in 0..cols {
                            dr[j] = inv * gv.data()[j] * gr[j] - coef * xr[j];
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if needs(*gamma) {
                    let mut dg = Tensor::zeros(gv.shape());
                    for (r, (xr, gr)) in xv
                        .data()
                        .chunks_exact(cols)
                        .zip(g.data().chunks_exact(cols))
                        .enumerate()
                    {
                        for j in 0..cols {
                            dg.data_mut()[j] += gr[j] * xr[j] * inv_rms[r];
                        }
                    }
                    accumulate(grads, *gamma, dg);
                }
            }
            Op::Rope {
                x,
                heads,
                positions,
                inv_freq,
            } => {
                let mut d = g.clone();
                let cols = d.cols();
                kernels::rope_rows(d.data_mut(), cols, *heads, positions, inv_freq, true);
                accumulate(grads, *x, d);
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.cols();
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                kernels::attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    d,
                    *shape,
                    probs,
                    g.data(),
                    dq.data_mut(),
                    dk.data_mut(),
                    dv.data_mut(),
                );
                for (var, t) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if needs(var) {
                        accumulate(grads, var, t);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = val(*logits);
                let vocab = lv.cols();
                let scale = g.item() / targets.len() as f64;
                let mut d = Tensor::new(lv.shape().to_vec(), probs.clone()).expect("probs shape");
                for (row, &t) in d.data_mut().chunks_exact_mut(vocab).zip(targets) {
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, d);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Tensor::filled(val(*x).shape(), g.item()));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    by_param: HashMap<String, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (k.as_str(), v))
    }
}
