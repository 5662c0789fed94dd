//! Minibatch training with alternating optimization.
//!
//! Each step refreshes the hard codes of the answers in the batch from the
//! current forward pass (the closed-form half of the alternation), computes
//! the hinge-plus-constraint objective against those fixed codes, and takes
//! one adaptive-moment step with decoupled weight decay on everything else.
//! Negatives are drawn uniformly from each question's non-positive pool,
//! one per positive per epoch, resampled every epoch.
//!
//! [`grad_check`] validates the whole backward stack against 64-bit central
//! finite differences at random non-kink points.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, TokenSequence};
use crate::error::{Error, Result};
use crate::matrix::Scalar;
use crate::model::{
    mean_abs_soft, triplet_backward, triplet_forward, ModelConfig, ModelParams,
};
use crate::serve;

pub const DEFAULT_BETA_GRID: [f32; 5] = [1.0, 2.0, 5.0, 10.0, 20.0];
pub const DEFAULT_DELTA_GRID: [f32; 5] = [0.0, 1e-7, 1e-6, 1e-5, 1e-4];

/// Full training configuration. The flat `key=value` config file uses the
/// field names below.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f32,
    pub delta: f32,
    pub margin: f32,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub attn_dim: usize,
    pub encoder_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 5.0,
            delta: 1e-6,
            margin: 0.1,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 16,
            seed: 42,
            seq_len: 12,
            embed_dim: 32,
            model_dim: 64,
            ff_dim: 128,
            attn_dim: 32,
            encoder_layers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 1.0) {
            return Err(Error::invalid_input("beta must be >= 1"));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::invalid_input("delta must be >= 0"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid_input("margin must be > 0"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid_input("learning rate must be > 0"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid_input("weight decay must be >= 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid_input("batch size and epochs must be >= 1"));
        }
        self.model_config(2).validate()?;
        if !DEFAULT_BETA_GRID.contains(&self.beta) {
            log::warn!("beta {} is outside the usual grid {:?}", self.beta, DEFAULT_BETA_GRID);
        }
        if !DEFAULT_DELTA_GRID.contains(&self.delta) {
            log::warn!(
                "delta {} is outside the usual grid {:?}",
                self.delta,
                DEFAULT_DELTA_GRID
            );
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            seq_len: self.seq_len,
            embed_dim: self.embed_dim,
            model_dim: self.model_dim,
            ff_dim: self.ff_dim,
            attn_dim: self.attn_dim,
            encoder_layers: self.encoder_layers,
        }
    }

    /// Set one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::invalid_input(format!("bad value for {what}: {value:?}"));
        match key {
            "beta" => self.beta = value.parse().map_err(|_| bad(key))?,
            "delta" => self.delta = value.parse().map_err(|_| bad(key))?,
            "margin" => self.margin = value.parse().map_err(|_| bad(key))?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "seq_len" => self.seq_len = value.parse().map_err(|_| bad(key))?,
            "embed_dim" => self.embed_dim = value.parse().map_err(|_| bad(key))?,
            "model_dim" => self.model_dim = value.parse().map_err(|_| bad(key))?,
            "ff_dim" => self.ff_dim = value.parse().map_err(|_| bad(key))?,
            "attn_dim" => self.attn_dim = value.parse().map_err(|_| bad(key))?,
            "encoder_layers" => self.encoder_layers = value.parse().map_err(|_| bad(key))?,
            other => {
                return Err(Error::invalid_input(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse a flat `key=value` file; `#` starts a comment line.
    pub fn load(path: &Path) -> Result<TrainConfig> {
        let mut config = TrainConfig::default();
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected key=value".into(),
            })?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        Ok(config)
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "beta={}\ndelta={}\nmargin={}\nlearning_rate={}\nweight_decay={}\nbatch_size={}\n\
             epochs={}\nseed={}\nseq_len={}\nembed_dim={}\nmodel_dim={}\nff_dim={}\nattn_dim={}\n\
             encoder_layers={}\n",
            self.beta,
            self.delta,
            self.margin,
            self.learning_rate,
            self.weight_decay,
            self.batch_size,
            self.epochs,
            self.seed,
            self.seq_len,
            self.embed_dim,
            self.model_dim,
            self.ff_dim,
            self.attn_dim,
            self.encoder_layers,
        )
    }
}

/// One training example: question, gold answer, sampled negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainTriplet {
    pub question_id: String,
    pub positive_id: String,
    pub negative_id: String,
}

/// Uniform draw from the question's non-positive pool members.
pub fn sample_negative(
    question_id: &str,
    dataset: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<String> {
    let pool = dataset
        .pools
        .get(question_id)
        .ok_or_else(|| Error::invalid_input(format!("unknown question {question_id:?}")))?;
    let positives = &dataset.positives[question_id];
    let negatives: Vec<&String> = pool.iter().filter(|aid| !positives.contains(*aid)).collect();
    if negatives.is_empty() {
        return Err(Error::invalid_input(format!(
            "question {question_id:?} has no negative candidates"
        )));
    }
    Ok(negatives[rng.gen_range(0..negatives.len())].clone())
}

/// One triplet per (question, positive) pair, negatives resampled from the
/// given rng. Questions without negatives are skipped with a warning.
pub fn build_triplets(dataset: &Dataset, rng: &mut ChaCha8Rng) -> Vec<TrainTriplet> {
    let mut out = Vec::with_capacity(dataset.num_examples);
    for (qid, positives) in &dataset.positives {
        for aid in positives {
            match sample_negative(qid, dataset, rng) {
                Ok(neg) => out.push(TrainTriplet {
                    question_id: qid.clone(),
                    positive_id: aid.clone(),
                    negative_id: neg,
                }),
                Err(e) => log::warn!("skipping triplet for {qid:?}: {e}"),
            }
        }
    }
    out
}

/// Adaptive moment estimation with decoupled weight decay.
pub struct AdamW {
    pub learning_rate: f32,
    pub weight_decay: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: u64,
    first_moment: ModelParams<f32>,
    second_moment: ModelParams<f32>,
}

impl AdamW {
    pub fn new(params: &ModelParams<f32>, learning_rate: f32, weight_decay: f32) -> AdamW {
        AdamW {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &mut ModelParams<f32>) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        let tensors = params.tensors_mut();
        let moments1 = self.first_moment.tensors_mut();
        let moments2 = self.second_moment.tensors_mut();
        let grad_tensors = grads.tensors_mut();
        for (((p, m), v), g) in tensors
            .into_iter()
            .zip(moments1)
            .zip(moments2)
            .zip(grad_tensors)
        {
            debug_assert_eq!(p.0, g.0);
            for i in 0..p.1.len() {
                let grad = g.1[i];
                m.1[i] = self.beta1 * m.1[i] + (1.0 - self.beta1) * grad;
                v.1[i] = self.beta2 * v.1[i] + (1.0 - self.beta2) * grad * grad;
                let m_hat = m.1[i] / bias1;
                let v_hat = v.1[i] / bias2;
                p.1[i] -= self.learning_rate
                    * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.1[i]);
            }
        }
    }
}

/// Mutable training state: parameters, optimizer moments, step counter,
/// per-step loss history.
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub optimizer: AdamW,
    pub steps: u64,
    pub loss_history: Vec<f32>,
    config: TrainConfig,
}

impl TrainState {
    pub fn new(config: &TrainConfig, vocab_size: usize) -> Result<TrainState> {
        config.validate()?;
        let params = ModelParams::init(config.model_config(vocab_size), config.seed)?;
        let optimizer = AdamW::new(&params, config.learning_rate, config.weight_decay);
        Ok(TrainState {
            params,
            optimizer,
            steps: 0,
            loss_history: Vec::new(),
            config: config.clone(),
        })
    }
}

/// One minibatch: refresh codes, compute J, backpropagate, apply one
/// optimizer step. Returns the batch loss (sum over triplets).
pub fn train_step(
    state: &mut TrainState,
    dataset: &Dataset,
    batch: &[TrainTriplet],
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let cfg = state.config.clone();
    let mut grads = state.params.zeros_like();
    let mut batch_loss = 0.0f32;
    for triplet in batch {
        let question = dataset
            .questions
            .get(&triplet.question_id)
            .ok_or_else(|| Error::usage(format!("unknown question {:?}", triplet.question_id)))?;
        let positive = dataset
            .answers
            .get(&triplet.positive_id)
            .ok_or_else(|| Error::usage(format!("unknown answer {:?}", triplet.positive_id)))?;
        let negative = dataset
            .answers
            .get(&triplet.negative_id)
            .ok_or_else(|| Error::usage(format!("unknown answer {:?}", triplet.negative_id)))?;
        let (out, caches) = triplet_forward(
            &state.params,
            question,
            positive,
            negative,
            cfg.beta,
            cfg.delta,
            cfg.margin,
        )
        .map_err(|e| {
            Error::numeric(format!(
                "beta {} delta {} step {} triplet ({}, {}, {}): {e}",
                cfg.beta,
                cfg.delta,
                state.steps,
                triplet.question_id,
                triplet.positive_id,
                triplet.negative_id
            ))
        })?;
        batch_loss += out.loss;
        triplet_backward(&caches, &state.params, &mut grads)?;
    }
    if !batch_loss.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite batch loss at beta {} delta {} step {}",
            cfg.beta, cfg.delta, state.steps
        )));
    }
    state.optimizer.step(&mut state.params, &mut grads);
    state.steps += 1;
    state.loss_history.push(batch_loss);
    Ok(batch_loss)
}

/// Per-epoch numbers recorded during training.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f32,
    pub dev_p_at_1: f64,
    pub dev_mrr: f64,
    pub mean_abs_soft: f32,
}

/// Training result: parameters from the epoch with the best dev precision
/// (earliest epoch wins ties) and the per-epoch history.
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Full training loop over a train/dev split.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    dev_set: &Dataset,
    vocab_size: usize,
) -> Result<TrainOutcome> {
    if train_set.questions.is_empty() || dev_set.questions.is_empty() {
        return Err(Error::invalid_input("train and dev splits must be non-empty"));
    }
    let mut state = TrainState::new(config, vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;

    // fixed held-out sample for the binarization diagnostic
    let held_out: Vec<&TokenSequence> = dev_set.answers.values().take(16).collect();

    for epoch in 0..config.epochs {
        let mut triplets = build_triplets(train_set, &mut rng);
        triplets.shuffle(&mut rng);
        if triplets.is_empty() {
            return Err(Error::invalid_input("no usable training triplets"));
        }
        let mut epoch_loss = 0.0f32;
        for batch in triplets.chunks(config.batch_size) {
            epoch_loss += train_step(&mut state, train_set, batch)?;
        }
        let train_loss = epoch_loss / triplets.len() as f32;

        let metrics = serve::evaluate(&state.params, dev_set)?;
        let abs_soft = mean_abs_over(&state.params, &held_out, config.beta)?;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.5} dev P@1 {:.4} MRR {:.4} mean|B| {abs_soft:.4}",
            metrics.p_at_1,
            metrics.mrr
        );
        history.push(EpochStats {
            epoch,
            train_loss,
            dev_p_at_1: metrics.p_at_1,
            dev_mrr: metrics.mrr,
            mean_abs_soft: abs_soft,
        });
        let better = match &best {
            None => true,
            Some((score, _, _)) => metrics.p_at_1 > *score,
        };
        if better {
            best = Some((metrics.p_at_1, epoch, state.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

fn mean_abs_over(
    params: &ModelParams<f32>,
    answers: &[&TokenSequence],
    beta: f32,
) -> Result<f32> {
    let mut total = 0.0f32;
    for seq in answers {
        total += mean_abs_soft(params, seq, beta)?;
    }
    Ok(total / answers.len() as f32)
}

/// History CSV: epoch, train_loss, dev_P@1, dev_MRR, mean_abs_B.
pub fn write_history_csv(history: &[EpochStats], path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    writeln!(w, "epoch,train_loss,dev_p_at_1,dev_mrr,mean_abs_b")?;
    for row in history {
        writeln!(
            w,
            "{},{},{},{},{}",
            row.epoch, row.train_loss, row.dev_p_at_1, row.dev_mrr, row.mean_abs_soft
        )?;
    }
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Settings for [`grad_check`]. Defaults match the acceptance setup: toy
/// dimensions, ten random points, 64-bit central differences, relative
/// tolerance 1e-4. The default step keeps the oracle's own O(step^2)
/// truncation two orders below the tolerance; the curvature of the
/// cosine-hinge objective makes steps near 1e-3 fail on truncation alone.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub beta: f64,
    pub delta: f64,
    pub margin: f64,
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig {
                vocab_size: 16,
                seq_len: 6,
                embed_dim: 8,
                model_dim: 8,
                ff_dim: 8,
                attn_dim: 4,
                encoder_layers: 1,
            },
            beta: 5.0,
            delta: 1e-6,
            margin: 0.1,
            points: 10,
            step: 5e-5,
            tolerance: 1e-4,
            seed: 1234,
        }
    }
}

/// Worst relative error seen for one parameter group.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_error: f64,
    pub parameters: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub points: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    /// One line per group plus a verdict, for the CLI.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&format!(
                "{:<28} {:>10} params   max rel error {:.3e}\n",
                g.group, g.parameters, g.max_rel_error
            ));
        }
        out.push_str(&format!(
            "{} (worst {:.3e}, tolerance {:.1e}, {} points)\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance,
            self.points
        ));
        out
    }
}

fn group_of(tensor: &str) -> String {
    if tensor.starts_with("embedding") {
        "embedding".into()
    } else if tensor.starts_with("encoder") || tensor == "input_proj" {
        "encoder".into()
    } else {
        tensor.into()
    }
}

/// Compare analytic gradients against central finite differences of
/// `loss_fn`, tensor by tensor. Returns (tensor name, max relative error).
pub fn compare_to_finite_differences(
    params: &ModelParams<f64>,
    grads: &ModelParams<f64>,
    step: f64,
    loss_fn: impl Fn(&ModelParams<f64>) -> Result<f64>,
) -> Result<Vec<(String, f64)>> {
    let mut work = params.clone();
    let mut analytic = grads.clone();
    let names: Vec<String> = work.tensors_mut().into_iter().map(|(n, _)| n).collect();
    let mut report = Vec::with_capacity(names.len());
    for (t, name) in names.iter().enumerate() {
        let len = work.tensors_mut()[t].1.len();
        let mut worst = 0.0f64;
        for i in 0..len {
            // skip the frozen padding row
            if name == "embedding_table" && i < params.config.embed_dim {
                continue;
            }
            let original = work.tensors_mut()[t].1[i];
            work.tensors_mut()[t].1[i] = original + step;
            let up = loss_fn(&work)?;
            work.tensors_mut()[t].1[i] = original - step;
            let down = loss_fn(&work)?;
            work.tensors_mut()[t].1[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.tensors_mut()[t].1[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
        report.push((name.clone(), worst));
    }
    Ok(report)
}

/// Gradient check over every parameter group at random non-kink points.
///
/// Each point draws fresh parameters and a fresh triplet. The codes of the
/// base point stay fixed across the finite-difference evaluations, exactly
/// as they do across one theta update of the alternating optimization.
/// Draws are rejected when the objective is not cleanly differentiable at
/// finite step size: the hinge must be active by more than 1e-3 (an
/// inactive hinge also zeroes the attention gradients, leaving nothing to
/// check) and every question max-pool row needs a top-two gap comfortably
/// above the finite-difference step, or the argmax flips mid-bracket.
pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut probe: ModelParams<f64> = ModelParams::init(config.model, 0)?;
    let mut group_sizes: BTreeMap<String, usize> = BTreeMap::new();
    for (name, tensor) in probe.tensors_mut() {
        *group_sizes.entry(group_of(&name)).or_insert(0) += tensor.len();
    }
    let mut worst: BTreeMap<String, f64> =
        group_sizes.keys().map(|k| (k.clone(), 0.0)).collect();

    let mut point = 0usize;
    let mut attempts = 0usize;
    while point < config.points {
        attempts += 1;
        if attempts > config.points * 500 {
            return Err(Error::numeric(
                "could not find enough non-kink points for gradient checking",
            ));
        }
        let params: ModelParams<f64> = ModelParams::init(config.model, rng.gen())?;
        let question = random_sequence(&mut rng, &config.model);
        let positive = random_sequence(&mut rng, &config.model);
        let negative = random_sequence(&mut rng, &config.model);

        let (out, caches) = triplet_forward(
            &params,
            &question,
            &positive,
            &negative,
            config.beta,
            config.delta,
            config.margin,
        )?;
        let active_gap = config.margin - out.score_pos + out.score_neg;
        if active_gap <= 2e-2 || !max_pool_gap_ok(&params, &question, 2e-2)? {
            continue;
        }
        point += 1;

        let mut grads = params.zeros_like();
        triplet_backward(&caches, &params, &mut grads)?;
        let (pos_code, neg_code) = caches.codes();
        let (pos_code, neg_code) = (pos_code.clone(), neg_code.clone());
        let per_tensor = compare_to_finite_differences(&params, &grads, config.step, |p| {
            crate::model::triplet_forward_fixed_codes(
                p,
                &question,
                &positive,
                &negative,
                config.beta,
                config.delta,
                config.margin,
                (&pos_code, &neg_code),
            )
            .map(|(o, _)| o.loss)
        })?;
        for (tensor, err) in per_tensor {
            let w = worst.get_mut(&group_of(&tensor)).expect("group known");
            *w = w.max(err);
        }
    }

    Ok(GradCheckReport {
        groups: worst
            .into_iter()
            .map(|(group, max_rel_error)| GroupReport {
                parameters: group_sizes[&group],
                group,
                max_rel_error,
            })
            .collect(),
        points: config.points,
        tolerance: config.tolerance,
    })
}

fn random_sequence(rng: &mut ChaCha8Rng, config: &ModelConfig) -> TokenSequence {
    let real = rng.gen_range(1..=config.seq_len);
    let mut ids: Vec<u32> = (0..real)
        .map(|_| rng.gen_range(2..config.vocab_size as u32))
        .collect();
    ids.resize(config.seq_len, 0);
    let mask = (0..config.seq_len).map(|i| i < real).collect();
    TokenSequence { ids, mask }
}

/// True when every row of the question's pooled features has a top-two gap
/// above `min_gap` (finite differences would cross the argmax otherwise).
fn max_pool_gap_ok<F: Scalar>(
    params: &ModelParams<F>,
    question: &TokenSequence,
    min_gap: f64,
) -> Result<bool> {
    let embedded = crate::encoder::embed(question, &params.embedding)?;
    let (features, _) = crate::encoder::encode(&embedded, &question.mask, &params.encoder)?;
    let unmasked: Vec<usize> = (0..question.mask.len())
        .filter(|&l| question.mask[l])
        .collect();
    if unmasked.len() < 2 {
        return Ok(true);
    }
    for d in 0..features.rows() {
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &l in &unmasked {
            let v = features.get(d, l).as_f64();
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        }
        if best - second < min_gap {
            return Ok(false);
        }
    }
    Ok(true)
}
