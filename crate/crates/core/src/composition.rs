//! Composition layer: reduce a D x L feature matrix to a D-vector.
//!
//! Questions use masked max-pooling. Answers use attention conditioned on
//! the pooled question vector: each answer column is scored by
//! `score . tanh(answer_proj * col + question_proj * v_q)`, the scores are
//! softmaxed over unmasked positions, and the answer vector is the weighted
//! sum of columns. During training the columns come from the soft matrix;
//! at serve time the bit-packed sign codes substitute directly, and
//! [`binary_attend_fast`] evaluates the same attention without unpacking
//! into floats: for a +/-1 column, `row . col` is twice the sum of the
//! row's weights at set bits minus the full row sum.

use crate::error::{Error, Result};
use crate::hashing::BinaryMatrix;
use crate::matrix::{Matrix, Scalar};

/// Attention parameters: `question_proj`, `answer_proj` are M x D, and
/// `score_weights` is the M-vector that turns the tanh features into a
/// scalar logit.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<F> {
    pub question_proj: Matrix<F>,
    pub answer_proj: Matrix<F>,
    pub score_weights: Vec<F>,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn hidden_dim(&self) -> usize {
        self.score_weights.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.question_proj.cols()
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams {
            question_proj: Matrix::zeros(self.question_proj.rows(), self.question_proj.cols()),
            answer_proj: Matrix::zeros(self.answer_proj.rows(), self.answer_proj.cols()),
            score_weights: vec![F::zero(); self.score_weights.len()],
        }
    }
}

/// Masked per-row max with the winning column per row, for backward.
pub fn max_pool<F: Scalar>(features: &Matrix<F>, mask: &[bool]) -> Result<(Vec<F>, Vec<usize>)> {
    if mask.len() != features.cols() {
        return Err(Error::usage("mask length does not match columns"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::usage("max_pool requires at least one unmasked column"));
    }
    let mut pooled = Vec::with_capacity(features.rows());
    let mut argmax = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        let row = features.row(r);
        let mut best = F::neg_infinity();
        let mut best_idx = usize::MAX;
        for (c, (&v, &m)) in row.iter().zip(mask).enumerate() {
            // first attaining index wins ties
            if m && v > best {
                best = v;
                best_idx = c;
            }
        }
        pooled.push(best);
        argmax.push(best_idx);
    }
    Ok((pooled, argmax))
}

/// Route each pooled gradient back to its argmax cell.
pub fn max_pool_backward<F: Scalar>(
    grad: &[F],
    argmax: &[usize],
    rows: usize,
    cols: usize,
) -> Matrix<F> {
    assert_eq!(grad.len(), rows);
    assert_eq!(argmax.len(), rows);
    let mut out = Matrix::zeros(rows, cols);
    for (r, (&g, &c)) in grad.iter().zip(argmax).enumerate() {
        out.set(r, c, g);
    }
    out
}

/// Activations [`attend_backward`] needs.
#[derive(Debug, Clone)]
pub struct AttendCache<F> {
    columns: Matrix<F>,
    question_vec: Vec<F>,
    mask: Vec<bool>,
    /// tanh features per position, M x L.
    hidden: Matrix<F>,
    alpha: Vec<F>,
}

impl<F: Scalar> AttendCache<F> {
    pub fn alpha(&self) -> &[F] {
        &self.alpha
    }
}

/// Attention over the columns of `columns` conditioned on `question_vec`.
///
/// Returns the composed answer vector and the attention weights (zero at
/// masked positions, summing to one over the rest).
pub fn attend<F: Scalar>(
    columns: &Matrix<F>,
    question_vec: &[F],
    params: &AttentionParams<F>,
    mask: &[bool],
) -> Result<(Vec<F>, Vec<F>, AttendCache<F>)> {
    let (dim, len) = columns.shape();
    if mask.len() != len {
        return Err(Error::usage("mask length does not match columns"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::usage("attend requires at least one unmasked column"));
    }
    if question_vec.len() != dim
        || params.question_proj.cols() != dim
        || params.answer_proj.cols() != dim
        || params.question_proj.rows() != params.score_weights.len()
        || params.answer_proj.rows() != params.score_weights.len()
    {
        return Err(Error::usage("attention shapes are inconsistent"));
    }

    // hidden[:, l] = tanh(answer_proj * col_l + question_proj * v_q)
    let question_bias = params.question_proj.mat_vec(question_vec);
    let mut hidden = params.answer_proj.matmul(columns);
    for r in 0..hidden.rows() {
        let b = question_bias[r];
        for v in hidden.row_mut(r) {
            *v = (*v + b).tanh();
        }
    }
    let logits = hidden.mat_tvec(&params.score_weights);
    let alpha = masked_softmax(&logits, mask);

    let mut answer_vec = vec![F::zero(); dim];
    for (l, &a) in alpha.iter().enumerate() {
        if a != F::zero() {
            for d in 0..dim {
                answer_vec[d] += a * columns.get(d, l);
            }
        }
    }
    let cache = AttendCache {
        columns: columns.clone(),
        question_vec: question_vec.to_vec(),
        mask: mask.to_vec(),
        hidden,
        alpha: alpha.clone(),
    };
    Ok((answer_vec, alpha, cache))
}

/// Gradients flowing out of [`attend`].
#[derive(Debug, Clone)]
pub struct AttendGrads<F> {
    pub columns: Matrix<F>,
    pub question_vec: Vec<F>,
}

/// Exact backward of [`attend`] given the gradient of the answer vector.
/// Parameter gradients accumulate into `grads`.
pub fn attend_backward<F: Scalar>(
    grad_answer: &[F],
    cache: &AttendCache<F>,
    params: &AttentionParams<F>,
    grads: &mut AttentionParams<F>,
) -> Result<AttendGrads<F>> {
    let (dim, len) = cache.columns.shape();
    if grad_answer.len() != dim {
        return Err(Error::usage("gradient length does not match answer vector"));
    }

    // answer_vec = sum_l alpha_l col_l
    let mut d_alpha = vec![F::zero(); len];
    let mut d_columns = Matrix::zeros(dim, len);
    for l in 0..len {
        if !cache.mask[l] {
            continue;
        }
        let mut acc = F::zero();
        for d in 0..dim {
            acc += grad_answer[d] * cache.columns.get(d, l);
            d_columns.set(d, l, cache.alpha[l] * grad_answer[d]);
        }
        d_alpha[l] = acc;
    }

    // softmax
    let inner: F = cache
        .alpha
        .iter()
        .zip(&d_alpha)
        .map(|(&a, &da)| a * da)
        .sum();
    let d_logits: Vec<F> = cache
        .alpha
        .iter()
        .zip(&d_alpha)
        .map(|(&a, &da)| a * (da - inner))
        .collect();

    // logit_l = score . hidden_l, hidden_l = tanh(answer_proj col_l + question_proj v_q)
    let hidden_dim = params.score_weights.len();
    let mut d_pre = Matrix::zeros(hidden_dim, len); // d at the tanh input
    let mut d_pre_total = vec![F::zero(); hidden_dim];
    for l in 0..len {
        if !cache.mask[l] {
            continue;
        }
        let dl = d_logits[l];
        for m in 0..hidden_dim {
            let t = cache.hidden.get(m, l);
            grads.score_weights[m] += dl * t;
            let dp = dl * params.score_weights[m] * (F::one() - t * t);
            d_pre.set(m, l, dp);
            d_pre_total[m] += dp;
        }
    }

    grads.answer_proj.add_assign(&d_pre.matmul_a_bt(&cache.columns));
    grads
        .question_proj
        .add_outer(&d_pre_total, &cache.question_vec);
    d_columns.add_assign(&params.answer_proj.matmul_at_b(&d_pre));
    let d_question = params.question_proj.mat_tvec(&d_pre_total);

    Ok(AttendGrads {
        columns: d_columns,
        question_vec: d_question,
    })
}

/// [`attend`] evaluated directly on a bit-packed sign matrix.
///
/// `answer_proj * col` is computed from the packed payload: one pass over
/// the set bits accumulates the projection rows, and each entry finishes as
/// `2 * accumulated - row_total`. The weighted column sum for the answer
/// vector uses the same identity with the attention weights. Matches
/// [`attend`] on the unpacked matrix to within float reassociation.
pub fn binary_attend_fast<F: Scalar>(
    code: &BinaryMatrix,
    question_vec: &[F],
    params: &AttentionParams<F>,
    mask: &[bool],
) -> Result<(Vec<F>, Vec<F>)> {
    let (dim, len) = (code.rows(), code.cols());
    if mask.len() != len {
        return Err(Error::usage("mask length does not match code columns"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::usage("attend requires at least one unmasked column"));
    }
    if question_vec.len() != dim || params.answer_proj.cols() != dim {
        return Err(Error::usage("attention shapes are inconsistent"));
    }
    let hidden_dim = params.score_weights.len();

    // Accumulate answer_proj rows at set bits, walking packed words.
    let mut acc = Matrix::zeros(hidden_dim, len);
    let mut alpha_acc = vec![F::zero(); dim]; // reused later for the answer vector
    visit_set_bits(code, |d, l| {
        for m in 0..hidden_dim {
            let v = acc.get(m, l) + params.answer_proj.get(m, d);
            acc.set(m, l, v);
        }
    });

    let row_totals: Vec<F> = (0..hidden_dim)
        .map(|m| params.answer_proj.row(m).iter().copied().sum())
        .collect();
    let question_bias = params.question_proj.mat_vec(question_vec);

    let mut logits = vec![F::zero(); len];
    let mut hidden = Matrix::zeros(hidden_dim, len);
    for l in 0..len {
        if !mask[l] {
            continue;
        }
        let mut logit = F::zero();
        for m in 0..hidden_dim {
            let projected = F::two() * acc.get(m, l) - row_totals[m];
            let t = (projected + question_bias[m]).tanh();
            hidden.set(m, l, t);
            logit += params.score_weights[m] * t;
        }
        logits[l] = logit;
    }
    let alpha = masked_softmax(&logits, mask);

    // answer_vec_d = sum_l alpha_l * sign(d, l)
    //              = 2 * (sum of alpha at set bits of row d) - alpha_total
    let alpha_total: F = alpha.iter().copied().sum();
    visit_set_bits(code, |d, l| {
        alpha_acc[d] += alpha[l];
    });
    let answer_vec: Vec<F> = alpha_acc
        .into_iter()
        .map(|a| F::two() * a - alpha_total)
        .collect();
    Ok((answer_vec, alpha))
}

/// Call `f(row, col)` for every set bit, traversing the packed payload one
/// word at a time with trailing-zero scans.
fn visit_set_bits(code: &BinaryMatrix, mut f: impl FnMut(usize, usize)) {
    let cols = code.cols();
    let payload = code.payload();
    let mut base = 0usize;
    for chunk in payload.chunks(8) {
        let mut word = 0u64;
        for (i, &b) in chunk.iter().enumerate() {
            word |= (b as u64) << (8 * i);
        }
        while word != 0 {
            let bit = word.trailing_zeros() as usize;
            let idx = base + bit;
            f(idx / cols, idx % cols);
            word &= word - 1;
        }
        base += chunk.len() * 8;
    }
}

/// Softmax over unmasked entries with max-subtraction; masked entries get 0.
fn masked_softmax<F: Scalar>(logits: &[F], mask: &[bool]) -> Vec<F> {
    let mut max = F::neg_infinity();
    for (&l, &m) in logits.iter().zip(mask) {
        if m && l > max {
            max = l;
        }
    }
    let mut out = vec![F::zero(); logits.len()];
    let mut total = F::zero();
    for (i, (&l, &m)) in logits.iter().zip(mask).enumerate() {
        if m {
            let e = (l - max).exp();
            out[i] = e;
            total += e;
        }
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashing::pack_bits;
    use crate::matrix::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_attention(rng: &mut ChaCha8Rng, hidden: usize, dim: usize) -> AttentionParams<f64> {
        AttentionParams {
            question_proj: Matrix::from_fn(hidden, dim, |_, _| rng.gen_range(-0.5..0.5)),
            answer_proj: Matrix::from_fn(hidden, dim, |_, _| rng.gen_range(-0.5..0.5)),
            score_weights: (0..hidden).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    }

    #[test]
    fn max_pool_per_row() {
        let h = Matrix::from_vec(2, 2, vec![1.0, 3.0, 2.0, 0.0]);
        let (v, arg) = max_pool(&h, &[true, true]).unwrap();
        assert_eq!(v, vec![3.0, 2.0]);
        assert_eq!(arg, vec![1, 0]);
    }

    #[test]
    fn max_pool_respects_mask() {
        let h = Matrix::from_vec(2, 2, vec![1.0, 3.0, 2.0, 0.0]);
        let (v, _) = max_pool(&h, &[true, false]).unwrap();
        assert_eq!(v, vec![1.0, 2.0]);
        assert!(max_pool(&h, &[false, false]).is_err());
    }

    #[test]
    fn max_pool_backward_routes_to_argmax() {
        let h = Matrix::from_vec(2, 3, vec![1.0, 3.0, 0.0, 5.0, 2.0, 4.0]);
        let (_, arg) = max_pool(&h, &[true, true, true]).unwrap();
        let g = max_pool_backward(&[1.0, -2.0], &arg, 2, 3);
        assert_eq!(g.as_slice(), &[0.0, 1.0, 0.0, -2.0, 0.0, 0.0]);

        // finite differences away from ties
        let step = 1e-6;
        for (r, c) in [(0usize, 1usize), (1usize, 0usize), (0usize, 2usize)] {
            let mut hp = h.clone();
            hp.set(r, c, h.get(r, c) + step);
            let (vp, _) = max_pool(&hp, &[true, true, true]).unwrap();
            let mut hm = h.clone();
            hm.set(r, c, h.get(r, c) - step);
            let (vm, _) = max_pool(&hm, &[true, true, true]).unwrap();
            let fd: f64 = vp.iter().sum::<f64>() - vm.iter().sum::<f64>();
            let analytic = if arg[r] == c { 1.0 } else { 0.0 };
            assert!((fd / (2.0 * step) - analytic).abs() < 1e-4);
        }
    }

    #[test]
    fn max_pool_first_index_wins_ties() {
        let h = Matrix::from_vec(1, 3, vec![2.0, 2.0, 1.0]);
        let (_, arg) = max_pool(&h, &[true, true, true]).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn attend_singleton_gives_unit_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = rand_attention(&mut rng, 3, 4);
        let cols = Matrix::from_fn(4, 1, |_, _| rng.gen_range(-1.0..1.0));
        let vq = vec![0.3, -0.2, 0.9, 0.0];
        let (va, alpha, _) = attend(&cols, &vq, &params, &[true]).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(va, cols.col(0));
    }

    #[test]
    fn attend_zero_score_weights_give_uniform_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = rand_attention(&mut rng, 3, 4);
        params.score_weights = vec![0.0; 3];
        let cols = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let vq = vec![0.1; 4];
        let mask = [true, true, false, true, false];
        let (_, alpha, _) = attend(&cols, &vq, &params, &mask).unwrap();
        for (l, &m) in mask.iter().enumerate() {
            if m {
                assert!((alpha[l] - 1.0 / 3.0).abs() < 1e-12);
            } else {
                assert_eq!(alpha[l], 0.0);
            }
        }
    }

    #[test]
    fn attend_alpha_normalizes_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = rand_attention(&mut rng, 4, 6);
        let cols = Matrix::from_fn(6, 7, |_, _| rng.gen_range(-1.0..1.0));
        let vq: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = [true, false, true, true, true, false, true];
        let (_, alpha, _) = attend(&cols, &vq, &params, &mask).unwrap();
        let sum: f64 = alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(alpha.iter().all(|&a| a >= 0.0));
        // answer vector stays in the convex hull of the unmasked columns
        let (va, _, _) = attend(&cols, &vq, &params, &mask).unwrap();
        for d in 0..6 {
            let lo = (0..7)
                .filter(|&l| mask[l])
                .map(|l| cols.get(d, l))
                .fold(f64::INFINITY, f64::min);
            let hi = (0..7)
                .filter(|&l| mask[l])
                .map(|l| cols.get(d, l))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(va[d] >= lo - 1e-9 && va[d] <= hi + 1e-9);
        }
    }

    #[test]
    fn attend_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (hidden, dim, len) = (3, 4, 5);
        let params = rand_attention(&mut rng, hidden, dim);
        let cols = Matrix::from_fn(dim, len, |_, _| rng.gen_range(-1.0..1.0));
        let vq: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = [true, true, false, true, true];
        let weights: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |p: &AttentionParams<f64>, cols: &Matrix<f64>, vq: &[f64]| -> f64 {
            let (va, _, _) = attend(cols, vq, p, &mask).unwrap();
            dot(&va, &weights)
        };

        let (_, _, cache) = attend(&cols, &vq, &params, &mask).unwrap();
        let mut grads = params.zeros_like();
        let out = attend_backward(&weights, &cache, &params, &mut grads).unwrap();

        let step = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

        // score weights
        for m in 0..hidden {
            let mut pp = params.clone();
            pp.score_weights[m] += step;
            let mut pm = params.clone();
            pm.score_weights[m] -= step;
            let fd = (loss(&pp, &cols, &vq) - loss(&pm, &cols, &vq)) / (2.0 * step);
            assert!(rel(grads.score_weights[m], fd) < 1e-4, "score_weights[{m}]");
        }
        // projections
        for (r, c) in [(0, 1), (2, 3), (1, 0)] {
            for which in 0..2 {
                let analytic = if which == 0 {
                    grads.answer_proj.get(r, c)
                } else {
                    grads.question_proj.get(r, c)
                };
                let mut pp = params.clone();
                let mut pm = params.clone();
                let (mp, mm) = if which == 0 {
                    (&mut pp.answer_proj, &mut pm.answer_proj)
                } else {
                    (&mut pp.question_proj, &mut pm.question_proj)
                };
                let v = mp.get(r, c);
                mp.set(r, c, v + step);
                mm.set(r, c, v - step);
                let fd = (loss(&pp, &cols, &vq) - loss(&pm, &cols, &vq)) / (2.0 * step);
                assert!(rel(analytic, fd) < 1e-4, "proj {which} ({r},{c})");
            }
        }
        // columns
        for (d, l) in [(0, 0), (3, 4), (2, 1)] {
            let mut cp = cols.clone();
            cp.set(d, l, cols.get(d, l) + step);
            let mut cm = cols.clone();
            cm.set(d, l, cols.get(d, l) - step);
            let fd = (loss(&params, &cp, &vq) - loss(&params, &cm, &vq)) / (2.0 * step);
            assert!(rel(out.columns.get(d, l), fd) < 1e-4, "columns ({d},{l})");
        }
        // question vector
        for d in 0..dim {
            let mut vp = vq.clone();
            vp[d] += step;
            let mut vm = vq.clone();
            vm[d] -= step;
            let fd = (loss(&params, &cols, &vp) - loss(&params, &cols, &vm)) / (2.0 * step);
            assert!(rel(out.question_vec[d], fd) < 1e-4, "question_vec[{d}]");
        }
    }

    #[test]
    fn fast_projection_identity_single_row() {
        // w = (0.5, -1, 2), b = (+1, +1, -1): direct dot and the bit trick
        // must both give -2.5
        let w = [0.5f64, -1.0, 2.0];
        let signs = Matrix::from_vec(3, 1, vec![1.0, 1.0, -1.0]);
        let direct: f64 = w
            .iter()
            .zip(signs.as_slice())
            .map(|(&a, &b)| a * b)
            .sum();
        assert_eq!(direct, -2.5);
        let set_sum = 0.5 + (-1.0);
        let total = 0.5 - 1.0 + 2.0;
        assert_eq!(2.0 * set_sum - total, -2.5);
    }

    #[test]
    fn fast_all_bits_set_gives_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = rand_attention(&mut rng, 3, 5);
        let signs = Matrix::from_vec(5, 1, vec![1.0; 5]);
        let code = pack_bits(&signs).unwrap();
        let vq = vec![0.0; 5];
        // question_proj * 0 = 0, so hidden = tanh(row sums)
        let (_, alpha) = binary_attend_fast(&code, &vq, &params, &[true]).unwrap();
        assert_eq!(alpha, vec![1.0]);
        let unpacked: Matrix<f64> = code.unpack();
        for m in 0..3 {
            let row_sum: f64 = params.answer_proj.row(m).iter().sum();
            let direct = dot(params.answer_proj.row(m), &unpacked.col(0));
            assert!((row_sum - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_path_matches_naive_attend() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let (hidden, dim, len) = (4, 16, 9);
            let params = rand_attention(&mut rng, hidden, dim);
            let signs = Matrix::from_fn(dim, len, |_, _| {
                if rng.gen_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            });
            let code = pack_bits(&signs).unwrap();
            let vq: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut mask: Vec<bool> = (0..len).map(|_| rng.gen_bool(0.8)).collect();
            mask[0] = true;
            let (va_fast, alpha_fast) = binary_attend_fast(&code, &vq, &params, &mask).unwrap();
            let (va, alpha, _) = attend(&signs, &vq, &params, &mask).unwrap();
            for l in 0..len {
                assert!(
                    (alpha[l] - alpha_fast[l]).abs() < 1e-12,
                    "trial {trial} alpha[{l}]"
                );
            }
            for d in 0..dim {
                assert!(
                    (va[d] - va_fast[d]).abs() < 1e-12,
                    "trial {trial} va[{d}]"
                );
            }
        }
    }

    #[test]
    fn fast_path_binary_answer_coordinates_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = rand_attention(&mut rng, 3, 8);
        let signs = Matrix::from_fn(8, 6, |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
        let code = pack_bits(&signs).unwrap();
        let vq: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (va, _) = binary_attend_fast(&code, &vq, &params, &[true; 6]).unwrap();
        assert!(va.iter().all(|&v| (-1.0 - 1e-9..=1.0 + 1e-9).contains(&v)));
    }
}
