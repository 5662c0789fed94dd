//! Token embedding and a small contextual encoder.
//!
//! The encoder maps an `E x L` embedded sequence to `D x L` contextual
//! features: an optional input projection (when `E != D`) followed by one or
//! more blocks of single-head scaled dot-product self-attention and a
//! position-wise feed-forward, both with residual connections. No dropout,
//! no layer norm; the point is a trainable contextual map with exact,
//! hand-derived backward passes.
//!
//! Padding never leaks: attention logits at padded keys are excluded from
//! every softmax, so altering values in padded columns cannot change any
//! unmasked output column. Padded output columns are zeroed.

use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::matrix::{Matrix, Scalar};

/// Word embedding table plus learned positional embeddings.
///
/// Row 0 of the table is the padding row: all-zero and frozen (padded
/// positions emit zero columns without reading it, and the trainer never
/// updates it).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams<F> {
    /// V x E.
    pub table: Matrix<F>,
    /// L x E.
    pub positional: Matrix<F>,
}

/// One encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    /// D x D.
    pub query_proj: Matrix<F>,
    /// D x D.
    pub key_proj: Matrix<F>,
    /// D x D.
    pub value_proj: Matrix<F>,
    /// F x D.
    pub ff_in: Matrix<F>,
    /// F.
    pub ff_in_bias: Vec<F>,
    /// D x F.
    pub ff_out: Matrix<F>,
    /// D.
    pub ff_out_bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    /// D x E, present exactly when E != D.
    pub input_proj: Option<Matrix<F>>,
    pub layers: Vec<EncoderLayer<F>>,
}

/// Embed a token sequence into an E x L matrix.
///
/// Column `l` is `table[ids[l]] + positional[l]` at unmasked positions and
/// all-zero at padded ones.
pub fn embed<F: Scalar>(seq: &TokenSequence, params: &EmbeddingParams<F>) -> Result<Matrix<F>> {
    let embed_dim = params.table.cols();
    let len = seq.len();
    if len > params.positional.rows() {
        return Err(Error::usage(format!(
            "sequence length {len} exceeds positional table {}",
            params.positional.rows()
        )));
    }
    let mut out = Matrix::zeros(embed_dim, len);
    for (pos, (&id, &m)) in seq.ids.iter().zip(&seq.mask).enumerate() {
        if !m {
            continue;
        }
        if id as usize >= params.table.rows() {
            return Err(Error::IndexOutOfRange {
                id,
                vocab_size: params.table.rows(),
            });
        }
        let word = params.table.row(id as usize);
        let positional = params.positional.row(pos);
        for e in 0..embed_dim {
            out.set(e, pos, word[e] + positional[e]);
        }
    }
    Ok(out)
}

/// Accumulate embedding gradients from an upstream E x L gradient.
pub fn embed_backward<F: Scalar>(
    grad: &Matrix<F>,
    seq: &TokenSequence,
    grads: &mut EmbeddingParams<F>,
) {
    for (pos, (&id, &m)) in seq.ids.iter().zip(&seq.mask).enumerate() {
        if !m {
            continue;
        }
        for e in 0..grad.rows() {
            let g = grad.get(e, pos);
            *grads
                .table
                .row_mut(id as usize)
                .get_mut(e)
                .expect("embed dim") += g;
            *grads.positional.row_mut(pos).get_mut(e).expect("embed dim") += g;
        }
    }
}

/// Forward activations needed by [`encode_backward`].
#[derive(Debug, Clone)]
pub struct EncodeCache<F> {
    input: Matrix<F>,
    mask: Vec<bool>,
    layers: Vec<LayerCache<F>>,
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    input: Matrix<F>,
    queries: Matrix<F>,
    keys: Matrix<F>,
    values: Matrix<F>,
    /// L x L attention weights, `alpha[key][query]`; zero rows at padding.
    alpha: Matrix<F>,
    /// Residual stream after attention, D x L.
    post_attn: Matrix<F>,
    /// tanh of the feed-forward hidden layer, F x L.
    ff_hidden: Matrix<F>,
}

/// Run the encoder. Returns the D x L output and the cache for backward.
pub fn encode<F: Scalar>(
    input: &Matrix<F>,
    mask: &[bool],
    params: &EncoderParams<F>,
) -> Result<(Matrix<F>, EncodeCache<F>)> {
    let len = input.cols();
    if mask.len() != len {
        return Err(Error::usage(format!(
            "mask length {} does not match {len} columns",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::usage("mask must have at least one unmasked position"));
    }
    if !input.is_finite() {
        return Err(Error::numeric("non-finite input to encoder"));
    }

    let mut h = match &params.input_proj {
        Some(proj) => proj.matmul(input),
        None => input.clone(),
    };
    let dim = h.rows();
    let scale = F::one() / F::from_f64((dim as f64).sqrt());

    let mut layer_caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let queries = layer.query_proj.matmul(&h);
        let keys = layer.key_proj.matmul(&h);
        let values = layer.value_proj.matmul(&h);

        // logits[key][query] = (k_key . q_query) * scale, softmax over keys
        let mut logits = keys.matmul_at_b(&queries);
        for v in logits.as_mut_slice() {
            *v *= scale;
        }
        let alpha = masked_softmax_over_rows(&logits, mask);

        // attn[:, q] = sum_k alpha[k][q] * values[:, k]
        let attn = values.matmul(&alpha);
        let mut post_attn = h.clone();
        post_attn.add_assign(&attn);

        let mut hidden = layer.ff_in.matmul(&post_attn);
        for r in 0..hidden.rows() {
            let b = layer.ff_in_bias[r];
            for v in hidden.row_mut(r) {
                *v = (*v + b).tanh();
            }
        }
        let mut out = layer.ff_out.matmul(&hidden);
        for r in 0..out.rows() {
            let b = layer.ff_out_bias[r];
            for v in out.row_mut(r) {
                *v += b;
            }
        }
        out.add_assign(&post_attn);

        layer_caches.push(LayerCache {
            input: h,
            queries,
            keys,
            values,
            alpha,
            post_attn,
            ff_hidden: hidden,
        });
        h = out;
    }

    zero_masked_columns(&mut h, mask);
    if !h.is_finite() {
        return Err(Error::numeric("non-finite encoder output"));
    }
    Ok((
        h,
        EncodeCache {
            input: input.clone(),
            mask: mask.to_vec(),
            layers: layer_caches,
        },
    ))
}

/// Exact reverse-mode gradients of [`encode`].
///
/// Accumulates parameter gradients into `grads` (same shapes as `params`)
/// and returns the gradient with respect to the E x L input.
pub fn encode_backward<F: Scalar>(
    grad_out: &Matrix<F>,
    cache: &EncodeCache<F>,
    params: &EncoderParams<F>,
    grads: &mut EncoderParams<F>,
) -> Result<Matrix<F>> {
    if cache.layers.len() != params.layers.len() {
        return Err(Error::usage("cache does not match encoder parameters"));
    }
    let len = cache.input.cols();
    let dim = params
        .layers
        .first()
        .map(|l| l.query_proj.rows())
        .or_else(|| params.input_proj.as_ref().map(|p| p.rows()))
        .unwrap_or(cache.input.rows());
    if grad_out.shape() != (dim, len) {
        return Err(Error::usage(format!(
            "gradient shape {:?} does not match encoder output ({dim}, {len})",
            grad_out.shape()
        )));
    }
    let scale = F::one() / F::from_f64((dim as f64).sqrt());

    let mut g = grad_out.clone();
    zero_masked_columns(&mut g, &cache.mask);

    for (layer, (lp, lg)) in cache
        .layers
        .iter()
        .zip(params.layers.iter().zip(grads.layers.iter_mut()))
        .rev()
    {
        // out = post_attn + ff_out * tanh(ff_in * post_attn + b1) + b2
        let d_ff_out_in = &g; // gradient at the ff_out output
        lg.ff_out.add_assign(&d_ff_out_in.matmul_a_bt(&layer.ff_hidden));
        add_row_sums(&mut lg.ff_out_bias, d_ff_out_in);
        let mut d_hidden = lp.ff_out.matmul_at_b(d_ff_out_in);
        for (dh, &t) in d_hidden
            .as_mut_slice()
            .iter_mut()
            .zip(layer.ff_hidden.as_slice())
        {
            *dh *= F::one() - t * t;
        }
        lg.ff_in.add_assign(&d_hidden.matmul_a_bt(&layer.post_attn));
        add_row_sums(&mut lg.ff_in_bias, &d_hidden);

        let mut d_post = g.clone(); // residual branch
        d_post.add_assign(&lp.ff_in.matmul_at_b(&d_hidden));

        // post_attn = input + values * alpha
        let d_attn = &d_post;
        let d_values = d_attn.matmul_a_bt(&layer.alpha);
        let d_alpha = layer.values.matmul_at_b(d_attn);
        let d_logits = masked_softmax_backward(&layer.alpha, &d_alpha, &cache.mask, scale);

        // logits = (keys^T queries) * scale
        let d_keys = layer.queries.matmul_a_bt(&d_logits);
        let d_queries = layer.keys.matmul(&d_logits);

        let mut d_input = d_post;
        lg.query_proj.add_assign(&d_queries.matmul_a_bt(&layer.input));
        d_input.add_assign(&lp.query_proj.matmul_at_b(&d_queries));
        lg.key_proj.add_assign(&d_keys.matmul_a_bt(&layer.input));
        d_input.add_assign(&lp.key_proj.matmul_at_b(&d_keys));
        lg.value_proj.add_assign(&d_values.matmul_a_bt(&layer.input));
        d_input.add_assign(&lp.value_proj.matmul_at_b(&d_values));

        g = d_input;
    }

    match (&params.input_proj, &mut grads.input_proj) {
        (Some(proj), Some(proj_grad)) => {
            proj_grad.add_assign(&g.matmul_a_bt(&cache.input));
            Ok(proj.matmul_at_b(&g))
        }
        (None, None) => Ok(g),
        _ => Err(Error::usage("gradient holder does not match parameters")),
    }
}

/// Column-wise softmax over unmasked rows; masked rows get zero weight.
fn masked_softmax_over_rows<F: Scalar>(logits: &Matrix<F>, mask: &[bool]) -> Matrix<F> {
    let (rows, cols) = logits.shape();
    let mut out = Matrix::zeros(rows, cols);
    for c in 0..cols {
        let mut max = F::neg_infinity();
        for r in 0..rows {
            if mask[r] && logits.get(r, c) > max {
                max = logits.get(r, c);
            }
        }
        let mut total = F::zero();
        for r in 0..rows {
            if mask[r] {
                let e = (logits.get(r, c) - max).exp();
                out.set(r, c, e);
                total += e;
            }
        }
        for r in 0..rows {
            if mask[r] {
                out.set(r, c, out.get(r, c) / total);
            }
        }
    }
    out
}

/// Backward of the masked softmax, folded with the logit scale:
/// d_logit[r][c] = scale * alpha[r][c] * (d_alpha[r][c] - sum_k alpha[k][c] d_alpha[k][c]).
fn masked_softmax_backward<F: Scalar>(
    alpha: &Matrix<F>,
    d_alpha: &Matrix<F>,
    mask: &[bool],
    scale: F,
) -> Matrix<F> {
    let (rows, cols) = alpha.shape();
    let mut out = Matrix::zeros(rows, cols);
    for c in 0..cols {
        let mut inner = F::zero();
        for r in 0..rows {
            if mask[r] {
                inner += alpha.get(r, c) * d_alpha.get(r, c);
            }
        }
        for r in 0..rows {
            if mask[r] {
                out.set(r, c, scale * alpha.get(r, c) * (d_alpha.get(r, c) - inner));
            }
        }
    }
    out
}

fn zero_masked_columns<F: Scalar>(m: &mut Matrix<F>, mask: &[bool]) {
    for r in 0..m.rows() {
        for (c, &keep) in mask.iter().enumerate() {
            if !keep {
                m.set(r, c, F::zero());
            }
        }
    }
}

fn add_row_sums<F: Scalar>(bias_grad: &mut [F], grad: &Matrix<F>) {
    for (r, b) in bias_grad.iter_mut().enumerate() {
        *b += grad.row(r).iter().copied().sum::<F>();
    }
}

impl<F: Scalar> EmbeddingParams<F> {
    pub fn zeros_like(&self) -> Self {
        EmbeddingParams {
            table: Matrix::zeros(self.table.rows(), self.table.cols()),
            positional: Matrix::zeros(self.positional.rows(), self.positional.cols()),
        }
    }
}

impl<F: Scalar> EncoderLayer<F> {
    pub fn zeros_like(&self) -> Self {
        EncoderLayer {
            query_proj: Matrix::zeros(self.query_proj.rows(), self.query_proj.cols()),
            key_proj: Matrix::zeros(self.key_proj.rows(), self.key_proj.cols()),
            value_proj: Matrix::zeros(self.value_proj.rows(), self.value_proj.cols()),
            ff_in: Matrix::zeros(self.ff_in.rows(), self.ff_in.cols()),
            ff_in_bias: vec![F::zero(); self.ff_in_bias.len()],
            ff_out: Matrix::zeros(self.ff_out.rows(), self.ff_out.cols()),
            ff_out_bias: vec![F::zero(); self.ff_out_bias.len()],
        }
    }
}

impl<F: Scalar> EncoderParams<F> {
    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            input_proj: self
                .input_proj
                .as_ref()
                .map(|p| Matrix::zeros(p.rows(), p.cols())),
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
        }
    }
}
