//! Slice-level numeric kernels shared by the taped graph and the tape-free
//! decode path. Callers are responsible for shape checks.

/// Logical transpose flag for [`gemm`] operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` and `b` are stored row-major in their untransposed layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: Trans,
    b: &[f64],
    tb: Trans,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee that every index reachable through
    // the (m, k, n) extents and the strides chosen for each layout is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d/dx of `x * sigmoid(x)`.
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise RMS normalisation; writes `1/rms` per row into `inv_rms`.
pub fn rms_norm_rows(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    eps: f64,
    out: &mut [f64],
    inv_rms: &mut [f64],
) {
    for (r, (xr, or)) in x
        .chunks_exact(cols)
        .zip(out.chunks_exact_mut(cols))
        .enumerate()
    {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        inv_rms[r] = inv;
        for ((o, &xv), &g) in or.iter_mut().zip(xr).zip(gamma) {
            *o = g * xv * inv;
        }
    }
}

/// Softmax over `row[..valid]`; entries past `valid` are set to exactly 0.
pub fn softmax_prefix(row: &mut [f64], valid: usize) {
    let max = row[..valid]
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v /= sum;
    }
    row[valid..].iter_mut().for_each(|v| *v = 0.0);
}

/// Inverse frequencies for the half-split rotary layout of one head.
pub fn rope_inv_freq(head_dim: usize, base: f64) -> Vec<f64> {
    let half = head_dim / 2;
    (0..half)
        .map(|i| 1.0 / base.powf(2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// Rotates every head of every row in place. Pair `(i, i + head_dim/2)` of a
/// head at position `p` is rotated by `p * inv_freq[i]`; `inverse` rotates by
/// the negated angle, which is the transpose of the forward map.
pub fn rope_rows(
    x: &mut [f64],
    cols: usize,
    heads: usize,
    positions: &[usize],
    inv_freq: &[f64],
    inverse: bool,
) {
    let head_dim = cols / heads;
    let half = head_dim / 2;
    let sign = if inverse { -1.0 } else { 1.0 };
    for (row, &pos) in x.chunks_exact_mut(cols).zip(positions) {
        for (i, &f) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * f;
            let (sin, cos) = angle.sin_cos();
            let sin = sin * sign;
            for h in 0..heads {
                let base = h * head_dim;
                let a = row[base + i];
                let b = row[base + i + half];
                row[base + i] = a * cos - b * sin;
                row[base + i + half] = a * sin + b * cos;
            }
        }
    }
}

/// Geometry of a batched multi-head causal attention call.
///
/// Queries are `batch * q_len` rows, keys/values are `batch * k_len` rows.
/// Query `i` sits at absolute position `q_offset + i` and sees keys
/// `0..=q_offset + i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub q_offset: usize,
}

/// Multi-head causal attention. When `probs` is given it receives the
/// attention weights laid out as `[batch][head][q][k]`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    shape: AttnShape,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let AttnShape {
        batch,
        q_len,
        k_len,
        heads,
        q_offset,
    } = shape;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut scores = vec![0.0; k_len];
    out.iter_mut().for_each(|o| *o = 0.0);
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dk;
            for i in 0..q_len {
                let valid = q_offset + i + 1;
                let qrow = &q[(b * q_len + i) * d + off..][..dk];
                for (j, s) in scores[..valid].iter_mut().enumerate() {
                    let krow = &k[(b * k_len + j) * d + off..][..dk];
                    *s = dot(qrow, krow) * scale;
                }
                softmax_prefix(&mut scores, valid);
                let orow = &mut out[(b * q_len + i) * d + off..][..dk];
                for (j, &p) in scores[..valid].iter().enumerate() {
                    let vrow = &v[(b * k_len + j) * d + off..][..dk];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
                if let Some(probs) = probs.as_deref_mut() {
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    probs[base..base + k_len].copy_from_slice(&scores);
                }
            }
        }
    }
}

/// Backward of [`attention_forward`] given the saved probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    shape: AttnShape,
    probs: &[f64],
    d_out: &[f64],
    dq: &mut [f64],
    dk_out: &mut [f64],
    dv: &mut [f64],
) {
    let AttnShape {
        batch,
        q_len,
        k_len,
        heads,
        q_offset,
    } = shape;
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dp = vec![0.0; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dk;
            for i in 0..q_len {
                let valid = q_offset + i + 1;
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let qi = (b * q_len + i) * d + off;
                let dorow = &d_out[qi..qi + dk];
                for j in 0..valid {
                    let vj = (b * k_len + j) * d + off;
                    dp[j] = dot(dorow, &v[vj..vj + dk]);
                    for (dvv, &g) in dv[vj..vj + dk].iter_mut().zip(dorow) {
                        *dvv += p[j] * g;
                    }
                }
                let s: f64 = (0..valid).map(|j| p[j] * dp[j]).sum();
                for j in 0..valid {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (b * k_len + j) * d + off;
                    for t in 0..dk {
                        dq[qi + t] += ds * k[kj + t];
                        dk_out[kj + t] += ds * q[qi + t];
                    }
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = x W` for one row `x` of length `k` and row-major `W` (`k x n`).
/// Avoids the packing overhead of [`gemm`] on single-row products.
pub fn vecmat(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
    assert_eq!(w.len(), x.len() * n, "vecmat weight size");
    assert_eq!(out.len(), n, "vecmat output size");
    out.fill(0.0);
    for (&xi, row) in x.iter().zip(w.chunks_exact(n)) {
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_every_transpose_combination() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, Trans::No), (&at, Trans::Yes)] {
            for (bb, tb) in [(&b, Trans::No), (&bt, Trans::Yes)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rope_inverse_undoes_forward() {
        let cols = 8;
        let mut x: Vec<f64> = (0..3 * cols).map(|i| i as f64 * 0.1 - 1.0).collect();
        let orig = x.clone();
        let inv = rope_inv_freq(4, 10_000.0);
        rope_rows(&mut x, cols, 2, &[0, 5, 17], &inv, false);
        rope_rows(&mut x, cols, 2, &[0, 5, 17], &inv, true);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let mut x = vec![0.3, -0.2, 1.5, 0.25];
        let orig = x.clone();
        rope_rows(&mut x, 4, 1, &[0], &rope_inv_freq(4, 10_000.0), false);
        assert_eq!(x, orig);
    }

    #[test]
    fn vecmat_matches_gemm() {
        let (k, n) = (7, 5);
        let x: Vec<f64> = (0..k).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        vecmat(&x, &w, n, &mut a);
        gemm(1, k, n, &x, Trans::No, &w, Trans::No, &mut b, false);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-14);
        }
    }
}
