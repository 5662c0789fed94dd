//! Similarity and training objective.
//!
//! Question/answer relevance is the cosine of the composed vectors. The
//! training objective over triplets (question, positive, negative) is a
//! hinge on the score gap plus a weighted binary-constraint term for the
//! two answers: `J = sum_i [max(0, margin - s+_i + s-_i)
//! + delta * (Jc(pos_i) + Jc(neg_i))]`.

use crate::matrix::{dot, Scalar};

/// Norm floor guarding cosine against zero vectors.
const NORM_FLOOR: f64 = 1e-12;

/// Cosine similarity with cached norms for backward.
#[derive(Debug, Clone)]
pub struct CosineCache<F> {
    left: Vec<F>,
    right: Vec<F>,
    left_norm: F,
    right_norm: F,
    value: F,
}

/// `s = (u . v) / (max(|u|, eps) * max(|v|, eps))`.
pub fn cosine<F: Scalar>(left: &[F], right: &[F]) -> (F, CosineCache<F>) {
    assert_eq!(left.len(), right.len());
    let floor = F::from_f64(NORM_FLOOR);
    let left_norm = dot(left, left).sqrt().max(floor);
    let right_norm = dot(right, right).sqrt().max(floor);
    let value = dot(left, right) / (left_norm * right_norm);
    (
        value,
        CosineCache {
            left: left.to_vec(),
            right: right.to_vec(),
            left_norm,
            right_norm,
            value,
        },
    )
}

/// Gradients of `grad_s * cosine` with respect to both vectors.
pub fn cosine_backward<F: Scalar>(grad_s: F, cache: &CosineCache<F>) -> (Vec<F>, Vec<F>) {
    // d s / d u = v / (|u||v|) - s * u / |u|^2
    let ln = cache.left_norm;
    let rn = cache.right_norm;
    let s = cache.value;
    let d_left: Vec<F> = cache
        .left
        .iter()
        .zip(&cache.right)
        .map(|(&u, &v)| grad_s * (v / (ln * rn) - s * u / (ln * ln)))
        .collect();
    let d_right: Vec<F> = cache
        .left
        .iter()
        .zip(&cache.right)
        .map(|(&u, &v)| grad_s * (u / (ln * rn) - s * v / (rn * rn)))
        .collect();
    (d_left, d_right)
}

/// Triplet hinge `max(0, margin - s_pos + s_neg)` and its subgradients
/// with respect to the two scores. The subgradient at the kink is zero.
pub fn hinge<F: Scalar>(s_pos: F, s_neg: F, margin: F) -> (F, F, F) {
    let gap = margin - s_pos + s_neg;
    if gap > F::zero() {
        (gap, -F::one(), F::one())
    } else {
        (F::zero(), F::zero(), F::zero())
    }
}

/// Per-triplet pieces of the objective.
#[derive(Debug, Clone, Copy)]
pub struct TripletTerms<F> {
    pub hinge: F,
    pub constraint_pos: F,
    pub constraint_neg: F,
}

/// `J = sum_i [hinge_i + delta * (Jc(pos_i) + Jc(neg_i))]`.
pub fn total_loss<F: Scalar>(terms: &[TripletTerms<F>], delta: F) -> F {
    terms
        .iter()
        .map(|t| t.hinge + delta * (t.constraint_pos + t.constraint_neg))
        .sum()
}
