//! Corpus ingestion: vocabulary, fixed-length token sequences, datasets.
//!
//! Tokenization is whitespace splitting on lowercased text. Sequences are
//! padded or prefix-truncated to a fixed length `L` with a validity mask.
//! Datasets arrive as JSONL, one question per line:
//!
//! ```text
//! {"qid":"q1","question":"...","answers":[{"aid":"a1","text":"...","label":1}, ...]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token -> dense id map with reserved PAD=0 and UNK=1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Build from a corpus of token lists. Tokens seen at least `min_count`
    /// times get ids in descending frequency order, ties broken
    /// lexicographically; everything else maps to UNK. The reserved token
    /// strings themselves are ignored if seen in the corpus.
    pub fn build(corpus: &[Vec<String>], min_count: usize) -> Result<Vocabulary> {
        if corpus.is_empty() {
            return Err(Error::invalid_input("empty corpus"));
        }
        if min_count == 0 {
            return Err(Error::invalid_input("min_count must be >= 1"));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            for tok in text {
                if tok == PAD_TOKEN || tok == UNK_TOKEN {
                    continue;
                }
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, n)| n >= min_count)
            .collect();
        // Descending count; BTreeMap iteration already gave lexicographic
        // order, and the sort is stable, so ties stay lexicographic.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.iter().map(|(t, _)| t.to_string()));
        Ok(Vocabulary::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { ids, tokens }
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // PAD and UNK are always present
    }

    /// One `token<TAB>id` line per entry, id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for (i, tok) in self.tokens.iter().enumerate() {
            writeln!(w, "{tok}\t{i}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected token<TAB>id".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad id {id:?}"),
            })?;
            if id != tokens.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("ids must be dense, expected {} got {id}", tokens.len()),
                });
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::invalid_input(
                "vocabulary file must start with the reserved pad/unk entries",
            ));
        }
        Ok(Vocabulary::from_tokens(tokens))
    }
}

/// Fixed-length padded token ids with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Lowercase + whitespace split.
pub fn tokenize_text(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// Map tokens to ids, keep the prefix if longer than `len`, pad the rest.
pub fn tokenize_pad(text: &[String], len: usize, vocab: &Vocabulary) -> Result<TokenSequence> {
    if text.is_empty() {
        return Err(Error::invalid_input("empty text"));
    }
    if len == 0 {
        return Err(Error::invalid_input("sequence length must be >= 1"));
    }
    let real = text.len().min(len);
    let mut ids = Vec::with_capacity(len);
    let mut mask = Vec::with_capacity(len);
    for tok in &text[..real] {
        ids.push(vocab.id(tok));
        mask.push(true);
    }
    ids.resize(len, PAD_ID);
    mask.resize(len, false);
    Ok(TokenSequence { ids, mask })
}

/// Question/answer corpus with per-question candidate pools.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub questions: BTreeMap<String, TokenSequence>,
    pub answers: BTreeMap<String, TokenSequence>,
    pub positives: BTreeMap<String, BTreeSet<String>>,
    pub pools: BTreeMap<String, Vec<String>>,
    /// Number of (question, positive answer) training pairs.
    pub num_examples: usize,
}

#[derive(Deserialize)]
struct AnswerRecord {
    aid: String,
    text: String,
    label: u8,
}

#[derive(Deserialize)]
struct QuestionRecord {
    qid: String,
    question: String,
    answers: Vec<AnswerRecord>,
}

impl Dataset {
    /// Load a JSONL file, tokenizing everything to length `len`.
    ///
    /// Questions whose answers are all negative are skipped with a warning,
    /// mirroring the usual benchmark filtering. A malformed line is a parse
    /// error naming the line number.
    pub fn load_jsonl(path: &Path, len: usize, vocab: &Vocabulary) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file), len, vocab)
    }

    pub fn from_reader(reader: impl BufRead, len: usize, vocab: &Vocabulary) -> Result<Dataset> {
        let mut ds = Dataset {
            questions: BTreeMap::new(),
            answers: BTreeMap::new(),
            positives: BTreeMap::new(),
            pools: BTreeMap::new(),
            num_examples: 0,
        };
        let mut answer_texts: HashMap<String, String> = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QuestionRecord =
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            let parse = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            if ds.questions.contains_key(&rec.qid) {
                return Err(parse(format!("duplicate question id {:?}", rec.qid)));
            }
            if rec.answers.is_empty() {
                return Err(parse(format!("question {:?} has an empty pool", rec.qid)));
            }
            let positives: BTreeSet<String> = rec
                .answers
                .iter()
                .filter(|a| a.label != 0)
                .map(|a| a.aid.clone())
                .collect();
            if positives.is_empty() {
                log::warn!(
                    "line {line_no}: question {:?} has no positive answers, skipped",
                    rec.qid
                );
                continue;
            }
            let q_tokens = tokenize_text(&rec.question);
            let q_seq = tokenize_pad(&q_tokens, len, vocab)
                .map_err(|e| parse(format!("question {:?}: {e}", rec.qid)))?;
            let mut pool = Vec::with_capacity(rec.answers.len());
            for ans in &rec.answers {
                match answer_texts.get(&ans.aid) {
                    Some(prev) if prev != &ans.text => {
                        return Err(parse(format!(
                            "answer id {:?} reused with different text",
                            ans.aid
                        )));
                    }
                    Some(_) => {}
                    None => {
                        let toks = tokenize_text(&ans.text);
                        let seq = tokenize_pad(&toks, len, vocab)
                            .map_err(|e| parse(format!("answer {:?}: {e}", ans.aid)))?;
                        ds.answers.insert(ans.aid.clone(), seq);
                        answer_texts.insert(ans.aid.clone(), ans.text.clone());
                    }
                }
                pool.push(ans.aid.clone());
            }
            ds.num_examples += positives.len();
            ds.questions.insert(rec.qid.clone(), q_seq);
            ds.positives.insert(rec.qid.clone(), positives);
            ds.pools.insert(rec.qid, pool);
        }
        if ds.questions.is_empty() {
            return Err(Error::invalid_input(
                "dataset contains no questions with positive answers",
            ));
        }
        Ok(ds)
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn vocab_ab() -> Vocabulary {
        Vocabulary::build(&[vec!["a".into(), "b".into(), "a".into()]], 1).unwrap()
    }

    #[test]
    fn build_vocab_frequency_then_lexicographic() {
        let v = vocab_ab();
        assert_eq!(v.id(PAD_TOKEN), 0);
        assert_eq!(v.id(UNK_TOKEN), 1);
        assert_eq!(v.id("a"), 2); // count 2 beats count 1
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn build_vocab_threshold_excludes_all() {
        let v = Vocabulary::build(&[vec!["a".into(), "b".into()]], 2).unwrap();
        assert_eq!(v.len(), 2); // only PAD and UNK
        assert_eq!(v.id("a"), UNK_ID);
    }

    #[test]
    fn build_vocab_counts_across_texts() {
        // y appears twice, x once
        let v = Vocabulary::build(&[vec!["x".into(), "y".into()], vec!["y".into()]], 1).unwrap();
        assert_eq!(v.id("y"), 2);
        assert_eq!(v.id("x"), 3);
    }

    #[test]
    fn build_vocab_tie_is_lexicographic() {
        let v = Vocabulary::build(&[vec!["b".into(), "a".into()]], 1).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
    }

    #[test]
    fn build_vocab_order_independent() {
        let c1 = vec![vec!["m".into(), "n".into()], vec!["n".into(), "k".into()]];
        let c2 = vec![vec!["k".into(), "n".into()], vec!["n".into(), "m".into()]];
        let v1 = Vocabulary::build(&c1, 1).unwrap();
        let v2 = Vocabulary::build(&c2, 1).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn build_vocab_empty_corpus_is_error() {
        assert!(Vocabulary::build(&[], 1).is_err());
    }

    #[test]
    fn tokenize_pad_basic() {
        let v = vocab_ab();
        let seq = tokenize_pad(&["a".into(), "b".into()], 4, &v).unwrap();
        assert_eq!(seq.ids, vec![2, 3, 0, 0]);
        assert_eq!(seq.mask, vec![true, true, false, false]);
    }

    #[test]
    fn tokenize_pad_truncates_prefix() {
        let v = vocab_ab();
        let seq = tokenize_pad(&["a".into(), "b".into(), "a".into()], 2, &v).unwrap();
        assert_eq!(seq.ids, vec![2, 3]);
        assert_eq!(seq.mask, vec![true, true]);
    }

    #[test]
    fn tokenize_pad_unknown_maps_to_unk() {
        let v = vocab_ab();
        let seq = tokenize_pad(&["zzz".into()], 2, &v).unwrap();
        assert_eq!(seq.ids, vec![UNK_ID, PAD_ID]);
        assert_eq!(seq.mask, vec![true, false]);
    }

    #[test]
    fn tokenize_pad_empty_text_is_error() {
        let v = vocab_ab();
        assert!(tokenize_pad(&[], 2, &v).is_err());
    }

    #[test]
    fn tokenize_pad_mask_pad_consistency() {
        let v = vocab_ab();
        for text_len in 1..6 {
            let text: Vec<String> = (0..text_len).map(|_| "a".into()).collect();
            let seq = tokenize_pad(&text, 4, &v).unwrap();
            assert_eq!(seq.ids.len(), 4);
            assert_eq!(seq.mask.len(), 4);
            for (id, m) in seq.ids.iter().zip(&seq.mask) {
                assert_eq!(*m, *id != PAD_ID || *m);
                if !*m {
                    assert_eq!(*id, PAD_ID);
                }
            }
            assert!(seq.real_len() >= 1);
        }
    }

    fn toy_jsonl() -> &'static str {
        r#"{"qid":"q1","question":"a b","answers":[{"aid":"a1","text":"a a","label":1},{"aid":"a2","text":"b","label":0}]}"#
    }

    #[test]
    fn load_dataset_single_line() {
        let v = vocab_ab();
        let ds = Dataset::from_reader(Cursor::new(toy_jsonl()), 4, &v).unwrap();
        assert_eq!(ds.num_examples, 1);
        assert_eq!(ds.pools["q1"].len(), 2);
        assert_eq!(ds.positives["q1"].len(), 1);
        assert!(ds.positives["q1"].contains("a1"));
    }

    #[test]
    fn load_dataset_skips_question_without_positives() {
        let v = vocab_ab();
        let text = format!(
            "{}\n{}",
            toy_jsonl(),
            r#"{"qid":"q2","question":"b","answers":[{"aid":"a3","text":"a","label":0}]}"#
        );
        let ds = Dataset::from_reader(Cursor::new(text), 4, &v).unwrap();
        assert_eq!(ds.num_questions(), 1);
        assert!(!ds.questions.contains_key("q2"));
    }

    #[test]
    fn load_dataset_missing_label_is_parse_error_with_line() {
        let v = vocab_ab();
        let text = format!(
            "{}\n{}",
            toy_jsonl(),
            r#"{"qid":"q2","question":"b","answers":[{"aid":"a3","text":"a"}]}"#
        );
        let err = Dataset::from_reader(Cursor::new(text), 4, &v).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn load_dataset_rejects_conflicting_answer_text() {
        let v = vocab_ab();
        let text = concat!(
            r#"{"qid":"q1","question":"a","answers":[{"aid":"a1","text":"a","label":1}]}"#,
            "\n",
            r#"{"qid":"q2","question":"b","answers":[{"aid":"a1","text":"b","label":1}]}"#
        );
        assert!(Dataset::from_reader(Cursor::new(text), 4, &v).is_err());
    }

    #[test]
    fn vocab_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = vocab_ab();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
    }
}
