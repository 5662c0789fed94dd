//! Query-time ranking, retrieval metrics, and the serving benchmark.
//!
//! Serving never caches questions (they arrive online): every query runs
//! the encoder once for the question, then scores candidates with the
//! packed-code attention kernel and cosine similarity. The benchmark
//! compares three ways of supplying answer representations:
//!
//! * `recalc` re-encodes every candidate per question (no cache),
//! * `float-store` reads cached soft matrices (4 bytes per element),
//! * `binary-store` reads the bit-packed code store (1 bit per element).
//!
//! Recalc and binary-store score identical hard codes, so their rankings
//! and metrics match exactly; float-store scores the soft matrices and is
//! reported separately. Reported memory is the representation payload only.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::codestore::{build_index, CodeStore};
use crate::composition::{attend, binary_attend_fast};
use crate::data::{Dataset, TokenSequence};
use crate::encoder::{embed, encode};
use crate::error::{Error, Result};
use crate::hashing::{hard_binarize, soft_binarize, BinaryMatrix};
use crate::matrix::{Matrix, Scalar};
use crate::model::{question_forward, ModelParams};
use crate::objective::cosine;

/// Refuse to build a float cache beyond this size; the point of the binary
/// store is that the dense cache does not fit comfortably.
const FLOAT_CACHE_LIMIT_BYTES: u64 = 4 << 30;

/// Candidates ordered by descending score; ties broken by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub question_id: String,
    pub ranked: Vec<(String, f64)>,
}

impl RankingResult {
    pub fn top(&self) -> Option<&(String, f64)> {
        self.ranked.first()
    }
}

fn sort_ranked(mut scored: Vec<(String, f64)>) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    scored
}

/// Cosine of the pooled question vector against the code's attention
/// composition.
fn score_code<F: Scalar>(
    params: &ModelParams<F>,
    question_vec: &[F],
    code: &BinaryMatrix,
    mask: &[bool],
) -> Result<f64> {
    let (answer_vec, _) = binary_attend_fast(code, question_vec, &params.attention, mask)?;
    let (score, _) = cosine(question_vec, &answer_vec);
    Ok(score.as_f64())
}

/// Rank every entry of the code store against one question.
///
/// The store holds no tokenization, so the answers' masks come from
/// `answers`; every stored id must be present there.
pub fn rank<F: Scalar>(
    question_id: &str,
    question: &TokenSequence,
    store: &CodeStore,
    answers: &BTreeMap<String, TokenSequence>,
    params: &ModelParams<F>,
) -> Result<RankingResult> {
    if store.is_empty() {
        return Err(Error::usage("code store is empty"));
    }
    if store.dims() != (params.config.model_dim, params.config.seq_len) {
        return Err(Error::usage(format!(
            "store dims {:?} do not match model ({}, {})",
            store.dims(),
            params.config.model_dim,
            params.config.seq_len
        )));
    }
    let question_vec = question_forward(params, question)?.vector;
    let mut scored = Vec::with_capacity(store.len());
    for (id, code) in store.iter() {
        let seq = answers
            .get(id)
            .ok_or_else(|| Error::usage(format!("no tokenization for stored answer {id:?}")))?;
        scored.push((id.to_string(), score_code(params, &question_vec, code, &seq.mask)?));
    }
    Ok(RankingResult {
        question_id: question_id.to_string(),
        ranked: sort_ranked(scored),
    })
}

/// Rank by recomputing every candidate's code from scratch (the path the
/// store is meant to replace). Scores identically to [`rank`] because both
/// end in the packed-code kernel on the same codes.
pub fn rank_recompute<F: Scalar>(
    question_id: &str,
    question: &TokenSequence,
    answers: &BTreeMap<String, TokenSequence>,
    params: &ModelParams<F>,
    beta: F,
) -> Result<RankingResult> {
    let question_vec = question_forward(params, question)?.vector;
    let mut scored = Vec::with_capacity(answers.len());
    for (id, seq) in answers {
        let embedded = embed(seq, &params.embedding)?;
        let (features, _) = encode(&embedded, &seq.mask, &params.encoder)?;
        let code = hard_binarize(&soft_binarize(&features, beta)?);
        scored.push((id.clone(), score_code(params, &question_vec, &code, &seq.mask)?));
    }
    Ok(RankingResult {
        question_id: question_id.to_string(),
        ranked: sort_ranked(scored),
    })
}

/// Mean precision at rank one over questions that have positives.
pub fn precision_at_1(
    rankings: &[RankingResult],
    positives: &BTreeMap<String, BTreeSet<String>>,
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for r in rankings {
        let Some(pos) = positives.get(&r.question_id).filter(|p| !p.is_empty()) else {
            continue;
        };
        total += 1;
        if let Some((top, _)) = r.top() {
            if pos.contains(top) {
                hits += 1;
            }
        }
    }
    hits as f64 / total.max(1) as f64
}

/// Mean reciprocal rank of the first positive.
pub fn mrr(rankings: &[RankingResult], positives: &BTreeMap<String, BTreeSet<String>>) -> f64 {
    let mut sum = 0.0;
    let mut total = 0usize;
    for r in rankings {
        let Some(pos) = positives.get(&r.question_id).filter(|p| !p.is_empty()) else {
            continue;
        };
        total += 1;
        for (rank, (id, _)) in r.ranked.iter().enumerate() {
            if pos.contains(id) {
                sum += 1.0 / (rank + 1) as f64;
                break;
            }
        }
    }
    sum / total.max(1) as f64
}

/// Mean average precision: precision at each positive's rank, averaged per
/// question, then over questions.
pub fn mean_average_precision(
    rankings: &[RankingResult],
    positives: &BTreeMap<String, BTreeSet<String>>,
) -> f64 {
    let mut sum = 0.0;
    let mut total = 0usize;
    for r in rankings {
        let Some(pos) = positives.get(&r.question_id).filter(|p| !p.is_empty()) else {
            continue;
        };
        total += 1;
        let mut found = 0usize;
        let mut ap = 0.0;
        for (rank, (id, _)) in r.ranked.iter().enumerate() {
            if pos.contains(id) {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        if found > 0 {
            sum += ap / found as f64;
        }
    }
    sum / total.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub p_at_1: f64,
    pub mrr: f64,
    pub map: f64,
    pub questions: usize,
}

/// Rank each question's candidate pool from hard codes and compute the
/// retrieval metrics.
pub fn evaluate<F: Scalar>(params: &ModelParams<F>, dataset: &Dataset) -> Result<EvalMetrics> {
    // sign codes do not depend on the tanh sharpness, so any beta >= 1 works
    let codes = build_index(params, &dataset.answers, F::one())?;
    let rankings = pool_rankings(params, dataset, |id, mask, question_vec| {
        let code = codes.get(id).expect("index covers all answers");
        score_code(params, question_vec, code, mask)
    })?;
    Ok(EvalMetrics {
        p_at_1: precision_at_1(&rankings, &dataset.positives),
        mrr: mrr(&rankings, &dataset.positives),
        map: mean_average_precision(&rankings, &dataset.positives),
        questions: rankings.len(),
    })
}

/// Rank every question's pool with a per-candidate scoring closure.
fn pool_rankings<F: Scalar>(
    params: &ModelParams<F>,
    dataset: &Dataset,
    mut score: impl FnMut(&str, &[bool], &[F]) -> Result<f64>,
) -> Result<Vec<RankingResult>> {
    let mut rankings = Vec::with_capacity(dataset.questions.len());
    for (qid, question) in &dataset.questions {
        let question_vec = question_forward(params, question)?.vector;
        let pool = &dataset.pools[qid];
        let mut scored = Vec::with_capacity(pool.len());
        for aid in pool {
            let seq = &dataset.answers[aid];
            scored.push((aid.clone(), score(aid, &seq.mask, &question_vec)?));
        }
        rankings.push(RankingResult {
            question_id: qid.clone(),
            ranked: sort_ranked(scored),
        });
    }
    Ok(rankings)
}

/// How candidate representations are supplied at query time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeMode {
    Recalc,
    FloatStore,
    BinaryStore,
}

impl ServeMode {
    pub fn parse(s: &str) -> Result<ServeMode> {
        match s {
            "recalc" => Ok(ServeMode::Recalc),
            "float-store" => Ok(ServeMode::FloatStore),
            "binary-store" => Ok(ServeMode::BinaryStore),
            other => Err(Error::invalid_input(format!(
                "unknown mode {other:?} (expected recalc, float-store, or binary-store)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ServeMode::Recalc => "recalc",
            ServeMode::FloatStore => "float-store",
            ServeMode::BinaryStore => "binary-store",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: ServeMode,
    pub seconds_per_question: f64,
    pub representation_bytes: u64,
    pub metrics: EvalMetrics,
    pub questions: usize,
    pub warmup: usize,
    pub parallel: bool,
}

/// Time per-question ranking over each question's candidate pool.
///
/// The first `warmup` questions are excluded from timing; cache/store
/// construction is not timed. Reported memory is the payload of the answer
/// representations only (zero for recalc).
pub fn bench(
    mode: ServeMode,
    params: &ModelParams<f32>,
    dataset: &Dataset,
    beta: f32,
    warmup: usize,
    parallel: bool,
) -> Result<BenchReport> {
    if dataset.questions.len() <= warmup {
        return Err(Error::invalid_input(format!(
            "need more than {warmup} questions for a timed run"
        )));
    }

    // representation caches, built outside the timed region
    let mut codes: BTreeMap<String, BinaryMatrix> = BTreeMap::new();
    let mut soft_cache: BTreeMap<String, Matrix<f32>> = BTreeMap::new();
    let representation_bytes: u64 = match mode {
        ServeMode::Recalc => 0,
        ServeMode::BinaryStore => {
            let store = build_index(params, &dataset.answers, beta)?;
            let bytes = store.payload_bytes();
            for (id, code) in store.iter() {
                codes.insert(id.to_string(), code.clone());
            }
            bytes
        }
        ServeMode::FloatStore => {
            let per_matrix =
                (params.config.model_dim * params.config.seq_len) as u64 * 4;
            let total = per_matrix * dataset.answers.len() as u64;
            if total > FLOAT_CACHE_LIMIT_BYTES {
                return Err(Error::Capacity(format!(
                    "float store would need {total} bytes (limit {FLOAT_CACHE_LIMIT_BYTES})"
                )));
            }
            for (id, seq) in &dataset.answers {
                let embedded = embed(seq, &params.embedding)?;
                let (features, _) = encode(&embedded, &seq.mask, &params.encoder)?;
                soft_cache.insert(id.clone(), soft_binarize(&features, beta)?);
            }
            total
        }
    };

    let score_candidate = |aid: &str, question_vec: &[f32]| -> Result<f64> {
        let seq = &dataset.answers[aid];
        match mode {
            ServeMode::Recalc => {
                let embedded = embed(seq, &params.embedding)?;
                let (features, _) = encode(&embedded, &seq.mask, &params.encoder)?;
                let code = hard_binarize(&soft_binarize(&features, beta)?);
                score_code(params, question_vec, &code, &seq.mask)
            }
            ServeMode::BinaryStore => {
                score_code(params, question_vec, &codes[aid], &seq.mask)
            }
            ServeMode::FloatStore => {
                let soft = &soft_cache[aid];
                let (answer_vec, _, _) =
                    attend(soft, question_vec, &params.attention, &seq.mask)?;
                let (score, _) = cosine(question_vec, &answer_vec);
                Ok(score.as_f64())
            }
        }
    };

    let mut rankings = Vec::with_capacity(dataset.questions.len());
    let mut timed = 0.0f64;
    let mut timed_questions = 0usize;
    for (i, (qid, question)) in dataset.questions.iter().enumerate() {
        let start = Instant::now();
        let question_vec = question_forward(params, question)?.vector;
        let pool = &dataset.pools[qid];
        let scored: Result<Vec<(String, f64)>> = if parallel {
            pool.par_iter()
                .map(|aid| Ok((aid.clone(), score_candidate(aid, &question_vec)?)))
                .collect()
        } else {
            pool.iter()
                .map(|aid| Ok((aid.clone(), score_candidate(aid, &question_vec)?)))
                .collect()
        };
        let ranked = sort_ranked(scored?);
        let elapsed = start.elapsed().as_secs_f64();
        if i >= warmup {
            timed += elapsed;
            timed_questions += 1;
        }
        rankings.push(RankingResult {
            question_id: qid.clone(),
            ranked,
        });
    }

    Ok(BenchReport {
        mode,
        seconds_per_question: timed / timed_questions as f64,
        representation_bytes,
        metrics: EvalMetrics {
            p_at_1: precision_at_1(&rankings, &dataset.positives),
            mrr: mrr(&rankings, &dataset.positives),
            map: mean_average_precision(&rankings, &dataset.positives),
            questions: rankings.len(),
        },
        questions: dataset.questions.len(),
        warmup,
        parallel,
    })
}

/// `mode,seconds_per_question,representation_bytes,p_at_1,mrr,map` rows.
pub fn write_bench_csv(reports: &[BenchReport], path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    writeln!(
        w,
        "mode,seconds_per_question,representation_bytes,p_at_1,mrr,map,questions,warmup,parallel"
    )?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.mode.name(),
            r.seconds_per_question,
            r.representation_bytes,
            r.metrics.p_at_1,
            r.metrics.mrr,
            r.metrics.map,
            r.questions,
            r.warmup,
            r.parallel
        )?;
    }
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_metrics_csv(metrics: &EvalMetrics, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    writeln!(w, "p_at_1,mrr,map,questions")?;
    writeln!(
        w,
        "{},{},{},{}",
        metrics.p_at_1, metrics.mrr, metrics.map, metrics.questions
    )?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One JSON object per question: qid, ranked answer ids, scores.
pub fn write_trace_jsonl(rankings: &[RankingResult], path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    for r in rankings {
        let aids: Vec<&str> = r.ranked.iter().map(|(id, _)| id.as_str()).collect();
        let scores: Vec<f64> = r.ranked.iter().map(|(_, s)| *s).collect();
        let line = serde_json::json!({
            "qid": r.question_id,
            "aids": aids,
            "scores": scores,
        });
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthetic::{generate, SyntheticConfig};

    fn toy_setup() -> (ModelParams<f32>, Dataset) {
        let spec = SyntheticConfig {
            train_questions: 6,
            dev_questions: 6,
            pool_size: 5,
            seq_len: 8,
            seed: 3,
            ..SyntheticConfig::default()
        };
        let bundle = generate(&spec).unwrap();
        let params = ModelParams::init(
            ModelConfig {
                vocab_size: bundle.vocab.len(),
                seq_len: 8,
                embed_dim: 10,
                model_dim: 10,
                ff_dim: 12,
                attn_dim: 5,
                encoder_layers: 1,
            },
            17,
        )
        .unwrap();
        (params, bundle.dev)
    }

    fn ranking(question_id: &str, order: &[(&str, f64)]) -> RankingResult {
        RankingResult {
            question_id: question_id.into(),
            ranked: order.iter().map(|(id, s)| (id.to_string(), *s)).collect(),
        }
    }

    fn positives(pairs: &[(&str, &[&str])]) -> BTreeMap<String, BTreeSet<String>> {
        pairs
            .iter()
            .map(|(q, ids)| {
                (
                    q.to_string(),
                    ids.iter().map(|s| s.to_string()).collect(),
                )
            })
            .collect()
    }

    #[test]
    fn metrics_positive_at_rank_1() {
        let r = vec![ranking("q", &[("a", 0.9), ("b", 0.5)])];
        let p = positives(&[("q", &["a"])]);
        assert_eq!(precision_at_1(&r, &p), 1.0);
        assert_eq!(mrr(&r, &p), 1.0);
        assert_eq!(mean_average_precision(&r, &p), 1.0);
    }

    #[test]
    fn metrics_positive_at_rank_2_of_5() {
        let r = vec![ranking(
            "q",
            &[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6), ("e", 0.5)],
        )];
        let p = positives(&[("q", &["b"])]);
        assert_eq!(precision_at_1(&r, &p), 0.0);
        assert_eq!(mrr(&r, &p), 0.5);
        assert_eq!(mean_average_precision(&r, &p), 0.5);
    }

    #[test]
    fn map_two_positives_at_ranks_1_and_3() {
        let r = vec![ranking(
            "q",
            &[("a", 0.9), ("b", 0.8), ("c", 0.7), ("d", 0.6)],
        )];
        let p = positives(&[("q", &["a", "c"])]);
        let expect = (1.0 / 1.0 + 2.0 / 3.0) / 2.0;
        assert!((mean_average_precision(&r, &p) - expect).abs() < 1e-9);
        assert!((expect - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn metrics_exclude_questions_without_positives() {
        let r = vec![
            ranking("q1", &[("a", 0.9), ("b", 0.5)]),
            ranking("q2", &[("a", 0.9), ("b", 0.5)]),
        ];
        let p = positives(&[("q1", &["a"])]); // q2 has no entry
        assert_eq!(precision_at_1(&r, &p), 1.0);
        assert_eq!(mrr(&r, &p), 1.0);
    }

    #[test]
    fn p_at_1_never_exceeds_mrr() {
        let r = vec![
            ranking("q1", &[("a", 0.9), ("b", 0.5), ("c", 0.2)]),
            ranking("q2", &[("a", 0.9), ("b", 0.5), ("c", 0.2)]),
        ];
        let p = positives(&[("q1", &["a"]), ("q2", &["c"])]);
        assert!(precision_at_1(&r, &p) <= mrr(&r, &p));
    }

    #[test]
    fn rank_single_answer_store() {
        let (params, ds) = toy_setup();
        let (aid, seq) = ds.answers.iter().next().unwrap();
        let single: BTreeMap<String, TokenSequence> =
            BTreeMap::from([(aid.clone(), seq.clone())]);
        let store = build_index(&params, &single, 5.0).unwrap();
        let question = ds.questions.values().next().unwrap();
        let result = rank("q", question, &store, &single, &params).unwrap();
        assert_eq!(result.ranked.len(), 1);
        assert_eq!(&result.ranked[0].0, aid);
    }

    #[test]
    fn rank_duplicate_contents_tie_broken_by_id() {
        let (params, ds) = toy_setup();
        let (_, seq) = ds.answers.iter().next().unwrap();
        let answers: BTreeMap<String, TokenSequence> = BTreeMap::from([
            ("dup_b".to_string(), seq.clone()),
            ("dup_a".to_string(), seq.clone()),
            ("dup_c".to_string(), seq.clone()),
        ]);
        let store = build_index(&params, &answers, 5.0).unwrap();
        let question = ds.questions.values().next().unwrap();
        let result = rank("q", question, &store, &answers, &params).unwrap();
        let ids: Vec<&str> = result.ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["dup_a", "dup_b", "dup_c"]);
        assert!(result.ranked.windows(2).all(|w| w[0].1 == w[1].1));
    }

    #[test]
    fn rank_from_store_equals_rank_from_recompute() {
        let (params, ds) = toy_setup();
        let store = build_index(&params, &ds.answers, 5.0).unwrap();
        for (qid, question) in &ds.questions {
            let from_store = rank(qid, question, &store, &ds.answers, &params).unwrap();
            let recomputed = rank_recompute(qid, question, &ds.answers, &params, 5.0).unwrap();
            assert_eq!(from_store, recomputed);
        }
    }

    #[test]
    fn rank_rejects_empty_store_and_dim_mismatch() {
        let (params, ds) = toy_setup();
        let question = ds.questions.values().next().unwrap();
        let empty = CodeStore::new(params.config.model_dim, params.config.seq_len);
        assert!(rank("q", question, &empty, &ds.answers, &params).is_err());
        let wrong = CodeStore::new(3, 3);
        assert!(rank("q", question, &wrong, &ds.answers, &params).is_err());
    }

    #[test]
    fn evaluate_returns_bounded_metrics() {
        let (params, ds) = toy_setup();
        let m = evaluate(&params, &ds).unwrap();
        for v in [m.p_at_1, m.mrr, m.map] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(m.p_at_1 <= m.mrr + 1e-12);
        assert_eq!(m.questions, ds.num_questions());
    }

    #[test]
    fn bench_modes_agree_on_binary_metrics() {
        let (params, ds) = toy_setup();
        let recalc = bench(ServeMode::Recalc, &params, &ds, 5.0, 1, false).unwrap();
        let binary = bench(ServeMode::BinaryStore, &params, &ds, 5.0, 1, false).unwrap();
        assert_eq!(recalc.metrics, binary.metrics);
        assert_eq!(recalc.representation_bytes, 0);
        assert!(binary.representation_bytes > 0);
        let float = bench(ServeMode::FloatStore, &params, &ds, 5.0, 1, false).unwrap();
        assert_eq!(
            float.representation_bytes,
            binary.representation_bytes * 32
        );
    }

    #[test]
    fn bench_parallel_matches_serial_metrics() {
        let (params, ds) = toy_setup();
        let serial = bench(ServeMode::BinaryStore, &params, &ds, 5.0, 1, false).unwrap();
        let parallel = bench(ServeMode::BinaryStore, &params, &ds, 5.0, 1, true).unwrap();
        assert_eq!(serial.metrics, parallel.metrics);
        assert!(parallel.parallel);
    }

    #[test]
    fn trace_jsonl_roundtrips_shape() {
        let r = vec![ranking("q1", &[("a", 0.75), ("b", 0.25)])];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace_jsonl(&r, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(v["qid"], "q1");
        assert_eq!(v["aids"][0], "a");
    }
}
