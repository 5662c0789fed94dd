//! Synthetic question/answer corpus with latent-topic structure.
//!
//! Every topic owns a small set of exclusive tokens. A question carries
//! three distinct tokens of its topic; so does its positive answer, which
//! forces an overlap of at least two topic tokens between the two. Negative
//! candidates are drawn from other topics and share no topic tokens with
//! the question. Filler tokens are shared by everyone and carry no signal.
//! The result is a small separable ranking task that a correct model must
//! be able to learn to near-perfect precision.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub topics: usize,
    pub tokens_per_topic: usize,
    pub filler_tokens: usize,
    pub train_questions: usize,
    pub dev_questions: usize,
    /// Candidates per question, one of them positive.
    pub pool_size: usize,
    /// Global answers generated per topic.
    pub answers_per_topic: usize,
    /// Sequence length used when tokenizing.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            topics: 10,
            tokens_per_topic: 4,
            filler_tokens: 30,
            train_questions: 200,
            dev_questions: 50,
            pool_size: 20,
            answers_per_topic: 8,
            seq_len: 12,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(Error::invalid_input("need at least two topics"));
        }
        if self.tokens_per_topic < 4 {
            return Err(Error::invalid_input(
                "tokens_per_topic must be >= 4 so question and answer overlap",
            ));
        }
        if self.pool_size < 2 {
            return Err(Error::invalid_input("pool_size must be >= 2"));
        }
        let negatives_available = (self.topics - 1) * self.answers_per_topic;
        if negatives_available < self.pool_size - 1 {
            return Err(Error::invalid_input(format!(
                "{} other-topic answers cannot fill pools of {}",
                negatives_available, self.pool_size
            )));
        }
        if self.seq_len < 4 {
            return Err(Error::invalid_input("seq_len must be >= 4"));
        }
        Ok(())
    }
}

/// Generated corpus: tokenized splits, the vocabulary, and the raw JSONL
/// lines (identical content) for writing to disk.
pub struct SyntheticBundle {
    pub train: Dataset,
    pub dev: Dataset,
    pub vocab: Vocabulary,
    pub train_jsonl: String,
    pub dev_jsonl: String,
}

struct GlobalAnswer {
    id: String,
    topic: usize,
    text: String,
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticBundle> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let topic_tokens: Vec<Vec<String>> = (0..config.topics)
        .map(|t| {
            (0..config.tokens_per_topic)
                .map(|j| format!("topic{t}x{j}"))
                .collect()
        })
        .collect();
    let fillers: Vec<String> = (0..config.filler_tokens)
        .map(|j| format!("filler{j}"))
        .collect();

    let mut answers = Vec::new();
    for topic in 0..config.topics {
        for i in 0..config.answers_per_topic {
            answers.push(GlobalAnswer {
                id: format!("a{topic:02}_{i:03}"),
                topic,
                text: compose_text(&mut rng, &topic_tokens[topic], &fillers),
            });
        }
    }

    let train_jsonl = render_split(config, &mut rng, "train", config.train_questions, &topic_tokens, &fillers, &answers)?;
    let dev_jsonl = render_split(config, &mut rng, "dev", config.dev_questions, &topic_tokens, &fillers, &answers)?;

    // vocabulary over everything the two splits can mention
    let mut corpus: Vec<Vec<String>> = Vec::new();
    for tokens in &topic_tokens {
        corpus.push(tokens.clone());
    }
    corpus.push(fillers.clone());
    let vocab = Vocabulary::build(&corpus, 1)?;

    let train = Dataset::from_reader(train_jsonl.as_bytes(), config.seq_len, &vocab)?;
    let dev = Dataset::from_reader(dev_jsonl.as_bytes(), config.seq_len, &vocab)?;
    Ok(SyntheticBundle {
        train,
        dev,
        vocab,
        train_jsonl,
        dev_jsonl,
    })
}

/// Three distinct topic tokens plus one or two fillers, shuffled.
fn compose_text(rng: &mut ChaCha8Rng, topic: &[String], fillers: &[String]) -> String {
    let mut tokens: Vec<String> = topic
        .choose_multiple(rng, 3)
        .cloned()
        .collect();
    let filler_count = rng.gen_range(1..=2);
    tokens.extend(fillers.choose_multiple(rng, filler_count).cloned());
    tokens.shuffle(rng);
    tokens.join(" ")
}

fn render_split(
    config: &SyntheticConfig,
    rng: &mut ChaCha8Rng,
    split: &str,
    count: usize,
    topic_tokens: &[Vec<String>],
    fillers: &[String],
    answers: &[GlobalAnswer],
) -> Result<String> {
    let mut out = String::new();
    for i in 0..count {
        let topic = rng.gen_range(0..config.topics);
        let question = compose_text(rng, &topic_tokens[topic], fillers);

        let same_topic: Vec<&GlobalAnswer> =
            answers.iter().filter(|a| a.topic == topic).collect();
        let positive = same_topic[rng.gen_range(0..same_topic.len())];
        let other_topic: Vec<&GlobalAnswer> =
            answers.iter().filter(|a| a.topic != topic).collect();
        let mut negatives: Vec<&&GlobalAnswer> = other_topic
            .choose_multiple(rng, config.pool_size - 1)
            .collect();

        let mut pool: Vec<(&GlobalAnswer, u8)> = vec![(positive, 1)];
        pool.extend(negatives.drain(..).map(|a| (*a, 0)));
        pool.shuffle(rng);

        let answers_json: Vec<String> = pool
            .iter()
            .map(|(a, label)| {
                format!(
                    r#"{{"aid":{},"text":{},"label":{label}}}"#,
                    serde_json::to_string(&a.id).expect("string"),
                    serde_json::to_string(&a.text).expect("string"),
                )
            })
            .collect();
        out.push_str(&format!(
            "{{\"qid\":\"q_{split}_{i:04}\",\"question\":{},\"answers\":[{}]}}\n",
            serde_json::to_string(&question).expect("string"),
            answers_json.join(","),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn generate_is_deterministic() {
        let config = SyntheticConfig::default();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.train_jsonl, b.train_jsonl);
        assert_eq!(a.dev_jsonl, b.dev_jsonl);
    }

    #[test]
    fn splits_have_requested_sizes_and_pools() {
        let config = SyntheticConfig {
            train_questions: 25,
            dev_questions: 9,
            ..SyntheticConfig::default()
        };
        let bundle = generate(&config).unwrap();
        assert_eq!(bundle.train.num_questions(), 25);
        assert_eq!(bundle.dev.num_questions(), 9);
        for pool in bundle.train.pools.values() {
            assert_eq!(pool.len(), config.pool_size);
        }
        for positives in bundle.train.positives.values() {
            assert_eq!(positives.len(), 1);
        }
        assert_eq!(bundle.train.num_examples, 25);
    }

    #[test]
    fn question_shares_topic_tokens_with_positive_only() {
        let config = SyntheticConfig::default();
        let bundle = generate(&config).unwrap();
        // reconstruct token sets from the raw jsonl
        for line in bundle.train_jsonl.lines().take(40) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let q_tokens: BTreeSet<&str> = v["question"]
                .as_str()
                .unwrap()
                .split(' ')
                .filter(|t| t.starts_with("topic"))
                .collect();
            for answer in v["answers"].as_array().unwrap() {
                let a_tokens: BTreeSet<&str> = answer["text"]
                    .as_str()
                    .unwrap()
                    .split(' ')
                    .filter(|t| t.starts_with("topic"))
                    .collect();
                let shared = q_tokens.intersection(&a_tokens).count();
                if answer["label"].as_u64().unwrap() == 1 {
                    assert!(shared >= 2, "positive shares {shared} topic tokens");
                } else {
                    assert_eq!(shared, 0, "negative shares topic tokens");
                }
            }
        }
    }

    #[test]
    fn rejects_impossible_pools() {
        let config = SyntheticConfig {
            topics: 2,
            answers_per_topic: 3,
            pool_size: 10,
            ..SyntheticConfig::default()
        };
        assert!(generate(&config).is_err());
    }
}
