//! Tape-free tensor operations with full shape and finiteness checks.

use super::kernels::{self, Trans};
use super::Tensor;
use crate::error::{EchoError, Result};

/// Boolean mask over a matrix; `true` marks an entry as masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    masked: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != rows * cols {
            return Err(EchoError::Shape {
                shape: vec![rows, cols],
                len: masked.len(),
            });
        }
        Ok(Self { rows, cols, masked })
    }

    /// Masks every entry `(i, j)` with `j > i`.
    pub fn causal(rows: usize, cols: usize) -> Self {
        let masked = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| j > i))
            .collect();
        Self { rows, cols, masked }
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.masked[i * self.cols + j]
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(EchoError::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    kernels::gemm(
        m,
        k,
        n,
        a.data(),
        Trans::No,
        b.data(),
        Trans::No,
        &mut out,
        false,
    );
    let t = Tensor::new(vec![m, n], out)?;
    t.check_finite("matmul")?;
    Ok(t)
}

/// Row-wise softmax with per-row max subtraction. Masked entries are exactly 0.
pub fn softmax_rows(m: &Tensor, mask: Option<&Mask>) -> Result<Tensor> {
    let (rows, cols) = (m.rows(), m.cols());
    if let Some(mask) = mask {
        if mask.rows != rows || mask.cols != cols {
            return Err(EchoError::Dimension {
                op: "softmax_rows",
                lhs: m.shape().to_vec(),
                rhs: vec![mask.rows, mask.cols],
            });
        }
    }
    let mut out = m.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(cols).enumerate() {
        let visible = |j: usize| mask.is_none_or(|mk| !mk.is_masked(i, j));
        let max = (0..cols)
            .filter(|&j| visible(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(EchoError::DegenerateRow { row: i });
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if visible(j) { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out.check_finite("softmax_rows")?;
    Ok(out)
}

/// `gamma * x / sqrt(mean(x^2) + eps)` over the last dimension.
pub fn rms_norm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    if gamma.shape() != [x.cols()] {
        return Err(EchoError::Dimension {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    let mut inv = vec![0.0; x.rows()];
    kernels::rms_norm_rows(
        x.data(),
        x.cols(),
        gamma.data(),
        eps,
        out.data_mut(),
        &mut inv,
    );
    out.check_finite("rms_norm")?;
    Ok(out)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = kernels::silu(*v));
    out.check_finite("silu")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_times_m_is_m() {
        let m = Tensor::from_rows(&[&[1.5, -2.0, 0.25], &[3.0, 4.0, -5.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_expansion() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn zero_matrix_annihilates() {
        let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let z = Tensor::zeros(&[3, 2]);
        assert_eq!(matmul(&z, &m).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&Tensor::filled(&[1, 4], 7.0), None).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_single_unmasked_entry() {
        let mask = Mask::new(1, 2, vec![false, true]).unwrap();
        let s = softmax_rows(&Tensor::from_rows(&[&[-3.0, 9.0]]), Some(&mask)).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_zero_and_ln3() {
        // exp(0) = 1, exp(ln 3) = 3, so the weights are 1/4 and 3/4.
        let s = softmax_rows(&Tensor::from_rows(&[&[0.0, 3f64.ln()]]), None).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mask = Mask::new(2, 2, vec![false, false, true, true]).unwrap();
        let err = softmax_rows(&Tensor::zeros(&[2, 2]), Some(&mask)).unwrap_err();
        assert!(matches!(err, EchoError::DegenerateRow { row: 1 }));
    }

    #[test]
    fn rms_norm_unit_input() {
        let y = rms_norm(
            &Tensor::filled(&[3, 4], 1.0),
            &Tensor::filled(&[4], 1.0),
            0.0,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rms_norm_three_four() {
        let y = rms_norm(
            &Tensor::from_rows(&[&[3.0, -4.0]]),
            &Tensor::filled(&[2], 1.0),
            0.0,
        )
        .unwrap();
        let r = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((y.data()[1] + 4.0 / r).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_rejects_wrong_gamma() {
        assert!(rms_norm(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2]), 1e-5).is_err());
    }

    #[test]
    fn silu_values() {
        let y = silu(&Tensor::new(vec![3], vec![0.0, 20.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-6);
        let want = 1.0 / (1.0 + (-1f64).exp());
        assert!((y.data()[2] - want).abs() < 1e-15);
        assert!((y.data()[2] - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let x = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(matches!(silu(&x), Err(EchoError::NonFinite { .. })));
    }

    fn mat(n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0f64..2.0, n * n)
            .prop_map(move |v| Tensor::new(vec![n, n], v).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 24)) {
            let s = softmax_rows(&Tensor::new(vec![4, 6], v).unwrap(), None).unwrap();
            for i in 0..4 {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_is_associative(a in mat(4), b in mat(4), c in mat(4), d in mat(4)) {
            let left = matmul(&matmul(&matmul(&a, &b).unwrap(), &c).unwrap(), &d).unwrap();
            let right = matmul(&a, &matmul(&b, &matmul(&c, &d).unwrap()).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }
}
