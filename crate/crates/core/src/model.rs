//! The full model: parameters, end-to-end forward/backward, checkpoints.
//!
//! A question becomes a vector by embed -> encode -> masked max-pool. An
//! answer becomes a vector by embed -> encode -> tanh sharpening ->
//! attention against the question vector; its hard sign code is taken from
//! the same forward pass, and only the soft matrix receives gradients (the
//! code is the closed-form half of the alternating optimization).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::composition::{
    attend, attend_backward, max_pool, max_pool_backward, AttendCache, AttentionParams,
};
use crate::data::TokenSequence;
use crate::encoder::{
    embed, embed_backward, encode, encode_backward, EmbeddingParams, EncodeCache, EncoderLayer,
    EncoderParams,
};
use crate::error::{Error, Result};
use crate::hashing::{
    binary_constraint_loss, hard_binarize, soft_binarize, soft_binarize_backward, BinaryMatrix,
};
use crate::matrix::{scaled_add, Matrix, Scalar};
use crate::objective::{cosine, cosine_backward, hinge};

const CHECKPOINT_MAGIC: &[u8; 4] = b"HASP";
const CHECKPOINT_VERSION: u32 = 1;

/// Model dimensions. `embed_dim` may differ from `model_dim`, in which case
/// the encoder starts with a learned input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub attn_dim: usize,
    pub encoder_layers: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab_size,
            self.seq_len,
            self.embed_dim,
            self.model_dim,
            self.ff_dim,
            self.attn_dim,
            self.encoder_layers,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::invalid_input("all model dimensions must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid_input("vocab must hold at least pad and unk"));
        }
        Ok(())
    }
}

/// Every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub embedding: EmbeddingParams<F>,
    pub encoder: EncoderParams<F>,
    pub attention: AttentionParams<F>,
}

impl<F: Scalar> ModelParams<F> {
    /// Uniform init in [-0.05, 0.05] from a fixed seed; the padding row of
    /// the embedding table stays zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams<F>> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| F::from_f64(rng.gen_range(-0.05..0.05)))
        };
        let embedding = EmbeddingParams {
            table: uniform(config.vocab_size, config.embed_dim),
            positional: uniform(config.seq_len, config.embed_dim),
        };
        let input_proj = if config.embed_dim != config.model_dim {
            Some(uniform(config.model_dim, config.embed_dim))
        } else {
            None
        };
        let layers = (0..config.encoder_layers)
            .map(|_| EncoderLayer {
                query_proj: uniform(config.model_dim, config.model_dim),
                key_proj: uniform(config.model_dim, config.model_dim),
                value_proj: uniform(config.model_dim, config.model_dim),
                ff_in: uniform(config.ff_dim, config.model_dim),
                ff_in_bias: uniform(1, config.ff_dim).as_slice().to_vec(),
                ff_out: uniform(config.model_dim, config.ff_dim),
                ff_out_bias: uniform(1, config.model_dim).as_slice().to_vec(),
            })
            .collect();
        let attention = AttentionParams {
            question_proj: uniform(config.attn_dim, config.model_dim),
            answer_proj: uniform(config.attn_dim, config.model_dim),
            score_weights: uniform(1, config.attn_dim).as_slice().to_vec(),
        };
        let mut params = ModelParams {
            config,
            embedding,
            encoder: EncoderParams { input_proj, layers },
            attention,
        };
        params.embedding.table.row_mut(0).fill(F::zero());
        Ok(params)
    }

    pub fn zeros_like(&self) -> ModelParams<F> {
        ModelParams {
            config: self.config,
            embedding: self.embedding.zeros_like(),
            encoder: self.encoder.zeros_like(),
            attention: self.attention.zeros_like(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config,
            embedding: EmbeddingParams {
                table: self.embedding.table.cast(),
                positional: self.embedding.positional.cast(),
            },
            encoder: EncoderParams {
                input_proj: self.encoder.input_proj.as_ref().map(|p| p.cast()),
                layers: self
                    .encoder
                    .layers
                    .iter()
                    .map(|l| EncoderLayer {
                        query_proj: l.query_proj.cast(),
                        key_proj: l.key_proj.cast(),
                        value_proj: l.value_proj.cast(),
                        ff_in: l.ff_in.cast(),
                        ff_in_bias: l.ff_in_bias.iter().map(|v| G::from_f64(v.as_f64())).collect(),
                        ff_out: l.ff_out.cast(),
                        ff_out_bias: l
                            .ff_out_bias
                            .iter()
                            .map(|v| G::from_f64(v.as_f64()))
                            .collect(),
                    })
                    .collect(),
            },
            attention: AttentionParams {
                question_proj: self.attention.question_proj.cast(),
                answer_proj: self.attention.answer_proj.cast(),
                score_weights: self
                    .attention
                    .score_weights
                    .iter()
                    .map(|v| G::from_f64(v.as_f64()))
                    .collect(),
            },
        }
    }

    /// Visit every tensor in declared (checkpoint) order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        let mut out: Vec<(String, &mut [F])> = Vec::new();
        out.push(("embedding_table".into(), self.embedding.table.as_mut_slice()));
        out.push((
            "embedding_positional".into(),
            self.embedding.positional.as_mut_slice(),
        ));
        if let Some(proj) = &mut self.encoder.input_proj {
            out.push(("input_proj".into(), proj.as_mut_slice()));
        }
        for (i, layer) in self.encoder.layers.iter_mut().enumerate() {
            out.push((format!("encoder{i}_query_proj"), layer.query_proj.as_mut_slice()));
            out.push((format!("encoder{i}_key_proj"), layer.key_proj.as_mut_slice()));
            out.push((format!("encoder{i}_value_proj"), layer.value_proj.as_mut_slice()));
            out.push((format!("encoder{i}_ff_in"), layer.ff_in.as_mut_slice()));
            out.push((format!("encoder{i}_ff_in_bias"), layer.ff_in_bias.as_mut_slice()));
            out.push((format!("encoder{i}_ff_out"), layer.ff_out.as_mut_slice()));
            out.push((format!("encoder{i}_ff_out_bias"), layer.ff_out_bias.as_mut_slice()));
        }
        out.push((
            "attention_question_proj".into(),
            self.attention.question_proj.as_mut_slice(),
        ));
        out.push((
            "attention_answer_proj".into(),
            self.attention.answer_proj.as_mut_slice(),
        ));
        out.push((
            "attention_score_weights".into(),
            self.attention.score_weights.as_mut_slice(),
        ));
        out
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() != self.config.seq_len {
            return Err(Error::usage(format!(
                "sequence length {} does not match model length {}",
                seq.len(),
                self.config.seq_len
            )));
        }
        Ok(())
    }
}

/// Cached question path: embed -> encode -> max-pool.
pub struct QuestionForward<F: Scalar> {
    seq: TokenSequence,
    encode_cache: EncodeCache<F>,
    argmax: Vec<usize>,
    features_shape: (usize, usize),
    pub vector: Vec<F>,
}

pub fn question_forward<F: Scalar>(
    params: &ModelParams<F>,
    seq: &TokenSequence,
) -> Result<QuestionForward<F>> {
    params.check_sequence(seq)?;
    let embedded = embed(seq, &params.embedding)?;
    let (features, encode_cache) = encode(&embedded, &seq.mask, &params.encoder)?;
    let (vector, argmax) = max_pool(&features, &seq.mask)?;
    Ok(QuestionForward {
        seq: seq.clone(),
        encode_cache,
        argmax,
        features_shape: features.shape(),
        vector,
    })
}

/// Cached answer path: embed -> encode -> soft binarize -> hard code ->
/// attention against the question vector.
pub struct AnswerForward<F: Scalar> {
    seq: TokenSequence,
    encode_cache: EncodeCache<F>,
    soft: Matrix<F>,
    attend_cache: AttendCache<F>,
    pub code: BinaryMatrix,
    pub vector: Vec<F>,
    pub constraint: F,
    constraint_grad: Matrix<F>,
}

pub fn answer_forward<F: Scalar>(
    params: &ModelParams<F>,
    seq: &TokenSequence,
    question_vec: &[F],
    beta: F,
) -> Result<AnswerForward<F>> {
    answer_forward_inner(params, seq, question_vec, beta, None)
}

/// [`answer_forward`] against a caller-supplied code instead of refreshing
/// it from this pass. This is the objective a single theta-step actually
/// sees (codes are constants between alternation updates), and it is what
/// the finite-difference oracle must evaluate: refreshing the sign inside
/// the perturbed evaluations would put kinks where the training objective
/// has none.
pub fn answer_forward_with_code<F: Scalar>(
    params: &ModelParams<F>,
    seq: &TokenSequence,
    question_vec: &[F],
    beta: F,
    code: &BinaryMatrix,
) -> Result<AnswerForward<F>> {
    answer_forward_inner(params, seq, question_vec, beta, Some(code))
}

fn answer_forward_inner<F: Scalar>(
    params: &ModelParams<F>,
    seq: &TokenSequence,
    question_vec: &[F],
    beta: F,
    fixed_code: Option<&BinaryMatrix>,
) -> Result<AnswerForward<F>> {
    params.check_sequence(seq)?;
    let embedded = embed(seq, &params.embedding)?;
    let (features, encode_cache) = encode(&embedded, &seq.mask, &params.encoder)?;
    let soft = soft_binarize(&features, beta)?;
    let code = match fixed_code {
        Some(c) => c.clone(),
        None => hard_binarize(&soft),
    };
    let (constraint, constraint_grad) = binary_constraint_loss(&soft, &code)?;
    let (vector, _, attend_cache) = attend(&soft, question_vec, &params.attention, &seq.mask)?;
    Ok(AnswerForward {
        seq: seq.clone(),
        encode_cache,
        soft,
        attend_cache,
        code,
        vector,
        constraint,
        constraint_grad,
    })
}

/// Mean |B| over the unmasked columns of an answer's soft matrix: how close
/// to binary the activations are (1.0 = fully saturated).
pub fn mean_abs_soft<F: Scalar>(
    params: &ModelParams<F>,
    seq: &TokenSequence,
    beta: F,
) -> Result<F> {
    params.check_sequence(seq)?;
    let embedded = embed(seq, &params.embedding)?;
    let (features, _) = encode(&embedded, &seq.mask, &params.encoder)?;
    let soft = soft_binarize(&features, beta)?;
    let mut total = F::zero();
    let mut count = 0usize;
    for d in 0..soft.rows() {
        for (l, &m) in seq.mask.iter().enumerate() {
            if m {
                total += soft.get(d, l).abs();
                count += 1;
            }
        }
    }
    Ok(total / F::from_f64(count as f64))
}

/// Loss pieces of one triplet.
#[derive(Debug, Clone, Copy)]
pub struct TripletOutput<F> {
    pub loss: F,
    pub hinge: F,
    pub score_pos: F,
    pub score_neg: F,
    pub constraint_pos: F,
    pub constraint_neg: F,
}

/// Everything the backward pass needs for one triplet.
pub struct TripletCaches<F: Scalar> {
    question: QuestionForward<F>,
    positive: AnswerForward<F>,
    negative: AnswerForward<F>,
    cos_pos: crate::objective::CosineCache<F>,
    cos_neg: crate::objective::CosineCache<F>,
    d_score_pos: F,
    d_score_neg: F,
    beta: F,
    delta: F,
}

impl<F: Scalar> TripletCaches<F> {
    /// Codes refreshed by this forward pass (positive, negative).
    pub fn codes(&self) -> (&BinaryMatrix, &BinaryMatrix) {
        (&self.positive.code, &self.negative.code)
    }
}

/// Forward pass of one triplet: J = hinge + delta * (Jc_pos + Jc_neg).
///
/// The hard codes are refreshed from this forward pass (the closed-form
/// alternation step) and enter the constraint as constants.
pub fn triplet_forward<F: Scalar>(
    params: &ModelParams<F>,
    question: &TokenSequence,
    positive: &TokenSequence,
    negative: &TokenSequence,
    beta: F,
    delta: F,
    margin: F,
) -> Result<(TripletOutput<F>, TripletCaches<F>)> {
    triplet_forward_inner(params, question, positive, negative, beta, delta, margin, None)
}

/// [`triplet_forward`] with both answers' codes pinned by the caller; see
/// [`answer_forward_with_code`].
pub fn triplet_forward_fixed_codes<F: Scalar>(
    params: &ModelParams<F>,
    question: &TokenSequence,
    positive: &TokenSequence,
    negative: &TokenSequence,
    beta: F,
    delta: F,
    margin: F,
    codes: (&BinaryMatrix, &BinaryMatrix),
) -> Result<(TripletOutput<F>, TripletCaches<F>)> {
    triplet_forward_inner(
        params,
        question,
        positive,
        negative,
        beta,
        delta,
        margin,
        Some(codes),
    )
}

#[allow(clippy::too_many_arguments)]
fn triplet_forward_inner<F: Scalar>(
    params: &ModelParams<F>,
    question: &TokenSequence,
    positive: &TokenSequence,
    negative: &TokenSequence,
    beta: F,
    delta: F,
    margin: F,
    codes: Option<(&BinaryMatrix, &BinaryMatrix)>,
) -> Result<(TripletOutput<F>, TripletCaches<F>)> {
    let q = question_forward(params, question)?;
    let (pos, neg) = match codes {
        None => (
            answer_forward(params, positive, &q.vector, beta)?,
            answer_forward(params, negative, &q.vector, beta)?,
        ),
        Some((pos_code, neg_code)) => (
            answer_forward_with_code(params, positive, &q.vector, beta, pos_code)?,
            answer_forward_with_code(params, negative, &q.vector, beta, neg_code)?,
        ),
    };
    let (score_pos, cos_pos) = cosine(&q.vector, &pos.vector);
    let (score_neg, cos_neg) = cosine(&q.vector, &neg.vector);
    let (hinge_loss, d_score_pos, d_score_neg) = hinge(score_pos, score_neg, margin);
    let loss = hinge_loss + delta * (pos.constraint + neg.constraint);
    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite triplet loss (s+ {score_pos}, s- {score_neg})"
        )));
    }
    Ok((
        TripletOutput {
            loss,
            hinge: hinge_loss,
            score_pos,
            score_neg,
            constraint_pos: pos.constraint,
            constraint_neg: neg.constraint,
        },
        TripletCaches {
            question: q,
            positive: pos,
            negative: neg,
            cos_pos,
            cos_neg,
            d_score_pos,
            d_score_neg,
            beta,
            delta,
        },
    ))
}

/// Accumulate dJ/dtheta for one triplet into `grads`.
pub fn triplet_backward<F: Scalar>(
    caches: &TripletCaches<F>,
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
) -> Result<()> {
    let mut d_question_vec = vec![F::zero(); caches.question.vector.len()];

    for (answer, cos_cache, d_score) in [
        (&caches.positive, &caches.cos_pos, caches.d_score_pos),
        (&caches.negative, &caches.cos_neg, caches.d_score_neg),
    ] {
        // cosine -> (question vector, answer vector)
        let (d_q, d_answer_vec) = cosine_backward(d_score, cos_cache);
        scaled_add(&mut d_question_vec, F::one(), &d_q);

        // attention -> (soft matrix, question vector, attention params)
        let attn_grads = attend_backward(
            &d_answer_vec,
            &answer.attend_cache,
            &params.attention,
            &mut grads.attention,
        )?;
        scaled_add(&mut d_question_vec, F::one(), &attn_grads.question_vec);

        // soft matrix also feels the binary constraint: delta * 2 (B - code)
        let mut d_soft = attn_grads.columns;
        d_soft.scaled_add_assign(caches.delta, &answer.constraint_grad);

        // tanh sharpening -> encoder -> embedding
        let d_features = soft_binarize_backward(&d_soft, &answer.soft, caches.beta);
        let d_embedded =
            encode_backward(&d_features, &answer.encode_cache, &params.encoder, &mut grads.encoder)?;
        embed_backward(&d_embedded, &answer.seq, &mut grads.embedding);
    }

    // question path: pooled vector -> features -> embedding
    let (rows, cols) = caches.question.features_shape;
    let d_features = max_pool_backward(&d_question_vec, &caches.question.argmax, rows, cols);
    let d_embedded = encode_backward(
        &d_features,
        &caches.question.encode_cache,
        &params.encoder,
        &mut grads.encoder,
    )?;
    embed_backward(&d_embedded, &caches.question.seq, &mut grads.embedding);
    // the padding row is frozen
    grads.embedding.table.row_mut(0).fill(F::zero());
    Ok(())
}

/// Write the checkpoint: magic, version, dimensions, the hashing/objective
/// hyperparameters, a shape table, then raw little-endian f32 tensors in
/// declared order.
pub fn save_checkpoint(
    params: &ModelParams<f32>,
    beta: f32,
    delta: f32,
    margin: f32,
    path: &Path,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let c = params.config;
    for dim in [
        c.vocab_size,
        c.seq_len,
        c.embed_dim,
        c.model_dim,
        c.ff_dim,
        c.attn_dim,
        c.encoder_layers,
    ] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for h in [beta, delta, margin] {
        w.write_all(&h.to_le_bytes())?;
    }
    let mut owned = params.clone();
    let tensors = owned.tensors_mut();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (_, data) in &tensors {
        w.write_all(&(data.len() as u64).to_le_bytes())?;
    }
    for (_, data) in &tensors {
        for v in data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Checkpoint plus the hyperparameters stored with it.
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub beta: f32,
    pub delta: f32,
    pub margin: f32,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut offset = 0u64;
    let mut read_exact = |r: &mut dyn Read, buf: &mut [u8], what: &str| -> Result<()> {
        r.read_exact(buf).map_err(|_| {
            Error::format(offset, format!("truncated checkpoint while reading {what}"))
        })?;
        offset += buf.len() as u64;
        Ok(())
    };
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut r, &mut u32buf, "version")?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        read_exact(&mut r, &mut u32buf, "dimensions")?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        seq_len: dims[1],
        embed_dim: dims[2],
        model_dim: dims[3],
        ff_dim: dims[4],
        attn_dim: dims[5],
        encoder_layers: dims[6],
    };
    let mut hyper = [0f32; 3];
    for h in &mut hyper {
        read_exact(&mut r, &mut u32buf, "hyperparameters")?;
        *h = f32::from_le_bytes(u32buf);
    }
    read_exact(&mut r, &mut u32buf, "tensor count")?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut params: ModelParams<f32> = ModelParams::init(config, 0)?;
    let mut lens = Vec::with_capacity(count);
    let mut u64buf = [0u8; 8];
    for _ in 0..count {
        read_exact(&mut r, &mut u64buf, "shape table")?;
        lens.push(u64::from_le_bytes(u64buf) as usize);
    }
    {
        let tensors = params.tensors_mut();
        if tensors.len() != count {
            return Err(Error::format(
                offset,
                format!("checkpoint has {count} tensors, model wants {}", tensors.len()),
            ));
        }
        for ((name, data), len) in tensors.into_iter().zip(lens) {
            if data.len() != len {
                return Err(Error::format(
                    offset,
                    format!("tensor {name} has {len} elements, model wants {}", data.len()),
                ));
            }
            for v in data.iter_mut() {
                read_exact(&mut r, &mut u32buf, &name)?;
                *v = f32::from_le_bytes(u32buf);
            }
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format(offset, "trailing bytes after tensors"));
    }
    Ok(Checkpoint {
        params,
        beta: hyper[0],
        delta: hyper[1],
        margin: hyper[2],
    })
}
