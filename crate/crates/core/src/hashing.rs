//! Hashing layer: soft binarization, hard sign codes, and the constraint
//! that pulls the two together.
//!
//! Training sharpens encoder features elementwise with `tanh(beta * h)`
//! (`beta >= 1`); storage takes the sign. The squared Frobenius distance
//! between the soft matrix and its sign code is the binary-constraint loss
//! whose weight pushes activations toward +/-1, so swapping the soft matrix
//! for the stored code at serve time loses little.
//!
//! # Code layout
//!
//! A `D x L` sign matrix packs into `ceil(D*L/8)` bytes. Element `(d, l)`
//! lives at linear index `d*L + l` (row-major), LSB-first within each byte;
//! bit 1 means +1, bit 0 means -1. Trailing pad bits are zero. This layout
//! is part of the code-store file format and must not change.

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

/// Bit-packed D x L matrix over {+1, -1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

/// Hashing hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashingConfig {
    /// Sharpness of the tanh relaxation, >= 1.
    pub beta: f32,
    /// Weight of the binary-constraint loss, >= 0.
    pub delta: f32,
}

impl HashingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 1.0) {
            return Err(Error::invalid_input(format!(
                "beta must be >= 1, got {}",
                self.beta
            )));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::invalid_input(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

pub fn payload_len(rows: usize, cols: usize) -> usize {
    (rows * cols).div_ceil(8)
}

impl BinaryMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn payload(&self) -> &[u8] {
        &self.bytes
    }

    pub fn from_payload(rows: usize, cols: usize, bytes: Vec<u8>) -> Result<BinaryMatrix> {
        let want = payload_len(rows, cols);
        if bytes.len() != want {
            return Err(Error::format(
                0,
                format!(
                    "payload length {} does not match {}x{} (want {want})",
                    bytes.len(),
                    rows,
                    cols
                ),
            ));
        }
        // Trailing pad bits must be zero so equal matrices compare equal.
        let used = rows * cols;
        if used % 8 != 0 {
            let last = bytes[want - 1];
            let pad_mask = !0u8 << (used % 8);
            if last & pad_mask != 0 {
                return Err(Error::format(
                    (want - 1) as u64,
                    "trailing pad bits must be zero",
                ));
            }
        }
        Ok(BinaryMatrix { rows, cols, bytes })
    }

    /// Sign at (r, c): +1 or -1.
    #[inline]
    pub fn sign(&self, r: usize, c: usize) -> i8 {
        let idx = r * self.cols + c;
        if self.bytes[idx / 8] >> (idx % 8) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn bit(&self, r: usize, c: usize) -> bool {
        let idx = r * self.cols + c;
        self.bytes[idx / 8] >> (idx % 8) & 1 == 1
    }

    /// Expand to a dense +/-1 matrix.
    pub fn unpack<F: Scalar>(&self) -> Matrix<F> {
        unpack_bits(&self.bytes, self.rows, self.cols).expect("self-consistent payload")
    }
}

/// Elementwise `tanh(beta * h)`.
pub fn soft_binarize<F: Scalar>(h: &Matrix<F>, beta: F) -> Result<Matrix<F>> {
    if beta < F::one() {
        return Err(Error::invalid_input(format!("beta must be >= 1, got {beta}")));
    }
    if !h.is_finite() {
        return Err(Error::numeric("non-finite input to soft binarization"));
    }
    Ok(h.map(|v| (beta * v).tanh()))
}

/// Chain rule through `y = tanh(beta x)`: dx = dy * beta * (1 - y^2).
pub fn soft_binarize_backward<F: Scalar>(grad_out: &Matrix<F>, soft: &Matrix<F>, beta: F) -> Matrix<F> {
    assert_eq!(grad_out.shape(), soft.shape());
    let mut out = grad_out.clone();
    for (g, &y) in out.as_mut_slice().iter_mut().zip(soft.as_slice()) {
        *g = *g * beta * (F::one() - y * y);
    }
    out
}

/// Elementwise sign with sgn(0) = +1, bit-packed.
pub fn hard_binarize<F: Scalar>(soft: &Matrix<F>) -> BinaryMatrix {
    let (rows, cols) = soft.shape();
    let mut bytes = vec![0u8; payload_len(rows, cols)];
    for r in 0..rows {
        for c in 0..cols {
            if soft.get(r, c) >= F::zero() {
                let idx = r * cols + c;
                bytes[idx / 8] |= 1 << (idx % 8);
            }
        }
    }
    BinaryMatrix { rows, cols, bytes }
}

/// Squared Frobenius distance to the code, with its gradient in the soft
/// matrix: `J = sum (B_ij - code_ij)^2`, `dJ/dB = 2 (B - code)`.
pub fn binary_constraint_loss<F: Scalar>(
    soft: &Matrix<F>,
    code: &BinaryMatrix,
) -> Result<(F, Matrix<F>)> {
    if soft.shape() != (code.rows(), code.cols()) {
        return Err(Error::usage(format!(
            "shape mismatch: soft {:?} vs code {}x{}",
            soft.shape(),
            code.rows(),
            code.cols()
        )));
    }
    let mut loss = F::zero();
    let mut grad = Matrix::zeros(soft.rows(), soft.cols());
    for r in 0..soft.rows() {
        for c in 0..soft.cols() {
            let diff = soft.get(r, c) - F::from_f64(code.sign(r, c) as f64);
            loss += diff * diff;
            grad.set(r, c, F::two() * diff);
        }
    }
    Ok((loss, grad))
}

/// Pack a +/-1 matrix into the layout documented at module level.
pub fn pack_bits<F: Scalar>(signs: &Matrix<F>) -> Result<BinaryMatrix> {
    let (rows, cols) = signs.shape();
    let mut bytes = vec![0u8; payload_len(rows, cols)];
    for r in 0..rows {
        for c in 0..cols {
            let v = signs.get(r, c);
            if v == F::one() {
                let idx = r * cols + c;
                bytes[idx / 8] |= 1 << (idx % 8);
            } else if v != -F::one() {
                return Err(Error::usage(format!(
                    "pack_bits requires +/-1 values, got {v} at ({r}, {c})"
                )));
            }
        }
    }
    Ok(BinaryMatrix { rows, cols, bytes })
}

/// Inverse of [`pack_bits`]; validates the payload length and pad bits.
pub fn unpack_bits<F: Scalar>(bytes: &[u8], rows: usize, cols: usize) -> Result<Matrix<F>> {
    let want = payload_len(rows, cols);
    if bytes.len() != want {
        return Err(Error::format(
            0,
            format!("payload length {} for {rows}x{cols}, want {want}", bytes.len()),
        ));
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let idx = r * cols + c;
            let v = if bytes[idx / 8] >> (idx % 8) & 1 == 1 {
                F::one()
            } else {
                -F::one()
            };
            out.set(r, c, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn soft_binarize_zero_maps_to_zero() {
        let h = Matrix::<f64>::zeros(2, 3);
        let b = soft_binarize(&h, 5.0).unwrap();
        assert!(b.as_slice().iter().all(|&v| v == 0.0));
        // derivative at 0 is beta
        let g = soft_binarize_backward(&Matrix::from_vec(2, 3, vec![1.0; 6]), &b, 5.0);
        assert!(g.as_slice().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn soft_binarize_known_value() {
        let h = Matrix::from_vec(1, 1, vec![0.5f64]);
        let b = soft_binarize(&h, 5.0).unwrap();
        assert!((b.get(0, 0) - 2.5f64.tanh()).abs() < 1e-15);
        assert!((b.get(0, 0) - 0.986614).abs() < 1e-6);
    }

    #[test]
    fn soft_binarize_gradient_known_value() {
        // d tanh(beta x)/dx at beta=5, x=0.3 is 5 (1 - tanh(1.5)^2)
        let h = Matrix::from_vec(1, 1, vec![0.3f64]);
        let b = soft_binarize(&h, 5.0).unwrap();
        let g = soft_binarize_backward(&Matrix::from_vec(1, 1, vec![1.0]), &b, 5.0);
        let expect = 5.0 * (1.0 - 1.5f64.tanh().powi(2));
        assert!((g.get(0, 0) - expect).abs() < 1e-12);
        assert!((g.get(0, 0) - 0.903533).abs() < 1e-6);
    }

    #[test]
    fn soft_binarize_gradient_matches_finite_difference() {
        let beta = 5.0f64;
        let xs = [-1.2, -0.4, 0.1, 0.5, 0.9, 1.1];
        let h = Matrix::from_vec(1, xs.len(), xs.to_vec());
        let b = soft_binarize(&h, beta).unwrap();
        let ones = Matrix::from_vec(1, xs.len(), vec![1.0; xs.len()]);
        let g = soft_binarize_backward(&ones, &b, beta);
        let step = 1e-6;
        for (i, &x) in xs.iter().enumerate() {
            let fd = ((beta * (x + step)).tanh() - (beta * (x - step)).tanh()) / (2.0 * step);
            let rel = (g.get(0, i) - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-5, "x={x}: analytic {} vs fd {fd}", g.get(0, i));
        }
    }

    #[test]
    fn soft_binarize_rejects_nonfinite() {
        let h = Matrix::from_vec(1, 1, vec![f64::NAN]);
        assert!(soft_binarize(&h, 1.0).is_err());
    }

    #[test]
    fn hard_binarize_sign_convention() {
        let b = Matrix::from_vec(2, 2, vec![0.3, -0.2, -0.9, 0.0]);
        let code = hard_binarize(&b);
        assert_eq!(code.sign(0, 0), 1);
        assert_eq!(code.sign(0, 1), -1);
        assert_eq!(code.sign(1, 0), -1);
        assert_eq!(code.sign(1, 1), 1); // sgn(0) = +1
    }

    #[test]
    fn hard_binarize_all_positive_sets_all_bits() {
        let b = Matrix::from_vec(2, 4, vec![1.0f32; 8]);
        let code = hard_binarize(&b);
        assert_eq!(code.payload(), &[0xFF]);
    }

    #[test]
    fn pack_layout_2x2() {
        // signs [+1,-1,-1,+1] row-major -> bits 1,0,0,1 LSB-first -> 0x09
        let signs = Matrix::from_vec(2, 2, vec![1.0, -1.0, -1.0, 1.0]);
        let code = pack_bits(&signs).unwrap();
        assert_eq!(code.payload(), &[0x09]);
    }

    #[test]
    fn pack_layout_1x3_with_pad_bits() {
        let signs = Matrix::from_vec(1, 3, vec![1.0, -1.0, 1.0]);
        let code = pack_bits(&signs).unwrap();
        assert_eq!(code.payload(), &[0x05]);
    }

    #[test]
    fn pack_layout_1x8_all_ones() {
        let signs = Matrix::from_vec(1, 8, vec![1.0; 8]);
        assert_eq!(pack_bits(&signs).unwrap().payload(), &[0xFF]);
    }

    #[test]
    fn pack_rejects_non_sign_values() {
        let m = Matrix::from_vec(1, 2, vec![1.0, 0.5]);
        assert!(pack_bits(&m).is_err());
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        assert!(unpack_bits::<f32>(&[0u8; 3], 2, 2).is_err());
    }

    #[test]
    fn from_payload_rejects_dirty_pad_bits() {
        assert!(BinaryMatrix::from_payload(1, 3, vec![0x0D]).is_err()); // bit 3 set
        assert!(BinaryMatrix::from_payload(1, 3, vec![0x05]).is_ok());
    }

    #[test]
    fn constraint_loss_zero_when_already_binary() {
        let b = Matrix::from_vec(2, 2, vec![1.0, -1.0, -1.0, 1.0]);
        let code = hard_binarize(&b);
        let (loss, grad) = binary_constraint_loss(&b, &code).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constraint_loss_all_zero_matrix() {
        // each term (0 - (+/-1))^2 = 1, summed over 4 elements
        let b = Matrix::<f64>::zeros(2, 2);
        let code = hard_binarize(&Matrix::from_vec(2, 2, vec![1.0, -1.0, 1.0, -1.0]));
        let (loss, _) = binary_constraint_loss(&b, &code).unwrap();
        assert_eq!(loss, 4.0);
    }

    #[test]
    fn constraint_loss_gradient_matches_finite_difference() {
        let vals: Vec<f64> = vec![0.7, -0.3, 0.1, -0.9, 0.4, 0.0];
        let b = Matrix::from_vec(2, 3, vals.clone());
        let code = hard_binarize(&b);
        let (_, grad) = binary_constraint_loss(&b, &code).unwrap();
        let step = 1e-6;
        for i in 0..vals.len() {
            let mut plus = vals.clone();
            plus[i] += step;
            let mut minus = vals.clone();
            minus[i] -= step;
            let lp = binary_constraint_loss(&Matrix::from_vec(2, 3, plus), &code)
                .unwrap()
                .0;
            let lm = binary_constraint_loss(&Matrix::from_vec(2, 3, minus), &code)
                .unwrap()
                .0;
            let fd = (lp - lm) / (2.0 * step);
            assert!(
                (grad.as_slice()[i] - fd).abs() < 1e-6,
                "element {i}: {} vs {fd}",
                grad.as_slice()[i]
            );
        }
    }

    #[test]
    fn constraint_loss_shape_mismatch_is_usage_error() {
        let b = Matrix::<f32>::zeros(2, 2);
        let code = hard_binarize(&Matrix::<f32>::zeros(2, 3));
        assert!(binary_constraint_loss(&b, &code).is_err());
    }

    #[test]
    fn sign_minimizes_frobenius_distance_exhaustively() {
        // over all X in {+/-1}^(2x2), sgn(B) attains the minimum distance
        let b = Matrix::from_vec(2, 2, vec![0.3, -0.1, 0.0, -2.0]);
        let code = hard_binarize(&b);
        let dist = |x: &[f64]| -> f64 {
            b.as_slice()
                .iter()
                .zip(x)
                .map(|(&v, &s)| (v - s) * (v - s))
                .sum()
        };
        let best: Vec<f64> = (0..4).map(|i| code.sign(i / 2, i % 2) as f64).collect();
        let best_dist = dist(&best);
        for bits in 0..16u32 {
            let x: Vec<f64> = (0..4)
                .map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 })
                .collect();
            assert!(best_dist <= dist(&x) + 1e-12);
        }
    }

    #[test]
    fn memory_ratio_is_32_for_divisible_sizes() {
        assert_eq!(payload_len(8, 8), 8);
        assert_eq!(8 * 8 * 4 / payload_len(8, 8), 32);
        assert_eq!(payload_len(768, 200), 19_200);
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(rows in 1usize..9, cols in 1usize..17, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let signs = Matrix::from_fn(rows, cols, |_, _| {
                if rng.gen_bool(0.5) { 1.0f32 } else { -1.0 }
            });
            let code = pack_bits(&signs).unwrap();
            prop_assert_eq!(code.payload().len(), payload_len(rows, cols));
            let back: Matrix<f32> = unpack_bits(code.payload(), rows, cols).unwrap();
            prop_assert_eq!(back, signs);
        }

        #[test]
        fn monotone_sharpening(h in -3.0f64..3.0, beta1 in 1.0f64..10.0, extra in 0.0f64..10.0) {
            let beta2 = beta1 + extra;
            prop_assert!((beta2 * h).tanh().abs() + 1e-15 >= (beta1 * h).tanh().abs());
        }

        #[test]
        fn hard_of_soft_equals_sign_of_input(vals in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let h = Matrix::from_vec(3, 4, vals);
            let soft = soft_binarize(&h, 5.0).unwrap();
            let direct = hard_binarize(&h);
            let via_soft = hard_binarize(&soft);
            prop_assert_eq!(direct, via_soft);
        }
    }
}
