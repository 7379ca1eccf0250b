//! Dataset loading, label dictionaries, and the attack token vocabulary.
//!
//! A sample is a [`CodeSnippet`]: a flattened, whitespace-separated token
//! stream (a Python function body with indentation removed) plus its
//! ground-truth function name. Datasets are newline-delimited JSON records
//! with string fields `id`, `code`, `label`, where `code` is the space-joined
//! token stream.
//!
//! Per-query classification happens against a [`Dictionary`] — a closed set of
//! candidate function names containing the true one — while the attack
//! optimizer works over a [`Vocabulary`] of all tokens it may write into a
//! program.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Errors produced while loading or validating corpus data.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: duplicate snippet id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("snippet `{id}`: {reason}")]
    InvalidSnippet { id: String, reason: String },
    #[error("vocabulary: {0}")]
    InvalidVocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A flattened program: an ordered token stream and its function-name label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    /// Unique identifier within a dataset.
    pub id: String,
    /// Non-empty tokens, none containing whitespace.
    pub tokens: Vec<String>,
    /// Ground-truth function name; non-empty, no whitespace.
    pub label: String,
}

impl CodeSnippet {
    /// Builds a snippet from a space-joined token stream, validating the
    /// invariants (non-empty tokens and label, no internal whitespace).
    pub fn from_code(id: &str, code: &str, label: &str) -> Result<Self, CorpusError> {
        let tokens: Vec<String> = code.split_whitespace().map(str::to_owned).collect();
        Self::new(id.to_owned(), tokens, label.to_owned())
    }

    /// Builds a snippet from pre-split tokens, validating the invariants.
    pub fn new(id: String, tokens: Vec<String>, label: String) -> Result<Self, CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidSnippet {
            id: id.clone(),
            reason: reason.to_owned(),
        };
        if id.is_empty() {
            return Err(CorpusError::InvalidSnippet {
                id: String::from("<empty>"),
                reason: String::from("id is empty"),
            });
        }
        if tokens.is_empty() {
            return Err(invalid("token stream is empty"));
        }
        if tokens
            .iter()
            .any(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(invalid("token is empty or contains whitespace"));
        }
        if label.is_empty() || label.chars().any(char::is_whitespace) {
            return Err(invalid("label is empty or contains whitespace"));
        }
        Ok(CodeSnippet { id, tokens, label })
    }

    /// Renders the token stream as a single space-joined string. The result
    /// round-trips: splitting it on whitespace reproduces `self.tokens`.
    #[must_use]
    pub fn render_tokens(&self) -> String {
        self.tokens.join(" ")
    }
}

/// A per-query closed set of candidate function names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dictionary {
    /// Distinct candidate names, in prompt-rendering order.
    pub labels: Vec<String>,
    /// Position of the ground-truth label inside `labels`.
    pub true_label_index: usize,
    /// Set when the requested size exceeded the available candidate names and
    /// the dictionary was clamped.
    pub truncated: bool,
}

impl Dictionary {
    /// Comma-space-joined rendering used inside prompts.
    #[must_use]
    pub fn render(&self) -> String {
        self.labels.join(", ")
    }

    /// The ground-truth label.
    #[must_use]
    pub fn true_label(&self) -> &str {
        &self.labels[self.true_label_index]
    }

    /// Case-insensitive membership lookup; returns the canonical spelling.
    #[must_use]
    pub fn find(&self, candidate: &str) -> Option<&str> {
        self.labels
            .iter()
            .find(|l| l.eq_ignore_ascii_case(candidate))
            .map(String::as_str)
    }
}

/// Samples a dictionary of `size` names containing `true_label` exactly once.
///
/// The remaining entries are drawn uniformly without replacement from
/// `all_labels \ {true_label}` (duplicates in `all_labels` are ignored), and
/// the true label is inserted at a seeded random position so its placement
/// carries no signal. Deterministic given identical inputs and seed. If `size`
/// exceeds the number of available names the result is clamped and flagged
/// `truncated`.
#[must_use]
pub fn build_dictionary(
    true_label: &str,
    all_labels: &[String],
    size: usize,
    seed: u64,
) -> Dictionary {
    let size = size.max(1);
    let mut seen = HashSet::new();
    let mut candidates: Vec<&str> = Vec::new();
    for l in all_labels {
        if l != true_label && seen.insert(l.as_str()) {
            candidates.push(l);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want = size.saturating_sub(1).min(candidates.len());
    let truncated = size > candidates.len() + 1;
    let sampled: Vec<&str> = candidates
        .choose_multiple(&mut rng, want)
        .copied()
        .collect();
    let mut labels: Vec<String> = sampled.into_iter().map(str::to_owned).collect();
    let true_label_index = rng.gen_range(0..=labels.len());
    labels.insert(true_label_index, true_label.to_owned());
    Dictionary {
        labels,
        true_label_index,
        truncated,
    }
}

/// The ordered token set Ω the attack may write into programs, with a dense
/// token ↔ index bijection.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary from every token occurring in the corpus plus
    /// `extra_tokens` (template keywords, slot fillers, …), in first-occurrence
    /// order. Indices are dense `0..len-1`.
    #[must_use]
    pub fn build(corpus: &[CodeSnippet], extra_tokens: &[String]) -> Self {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        let all = corpus
            .iter()
            .flat_map(|s| s.tokens.iter())
            .chain(extra_tokens.iter());
        for t in all {
            if !index.contains_key(t.as_str()) {
                index.insert(t.clone(), tokens.len());
                tokens.push(t.clone());
            }
        }
        Vocabulary { tokens, index }
    }

    /// Rebuilds a vocabulary from an ordered token list (e.g. a dump).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::InvalidVocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Number of tokens |Ω|.
    #[must_use]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Returns `true` when the vocabulary holds no tokens.
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The token at `index`, or `None` when out of range.
    #[must_use]
    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// The index of `token`, or `None` when absent.
    #[must_use]
    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// The index of `token`; unknown tokens map to the reserved sentinel
    /// index 0 (the vocabulary's first token). Panics on an empty vocabulary.
    #[must_use]
    pub fn index_or_sentinel(&self, token: &str) -> usize {
        assert!(!self.is_empty(), "vocabulary is empty");
        self.lookup(token).unwrap_or(0)
    }

    /// Ordered view of all tokens.
    #[must_use]
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the ordered token list; identifies the vocabulary inside
    /// checkpoints so stale parameter files are rejected.
    #[must_use]
    pub fn hash_hex(&self) -> String {
        hash_strings(&self.tokens)
    }

    /// Writes the vocabulary as newline-delimited `{token, index}` records.
    pub fn dump(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let rec = IndexRecord {
                token: t.clone(),
                index: i,
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("serialize"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Loads a vocabulary dump, validating that indices are dense and ordered.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: IndexRecord =
                serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                    line: lineno + 1,
                    reason: e.to_string(),
                })?;
            if rec.index != tokens.len() {
                return Err(CorpusError::InvalidVocab(format!(
                    "non-dense index {} at line {}",
                    rec.index,
                    lineno + 1
                )));
            }
            tokens.push(rec.token);
        }
        Self::from_tokens(tokens)
    }
}

/// The global label set L: every distinct function name in a corpus, in
/// first-occurrence order, with a dense label ↔ index bijection.
#[derive(Clone, Debug)]
pub struct LabelSet {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    /// Collects the distinct labels of `corpus` in first-occurrence order.
    #[must_use]
    pub fn build(corpus: &[CodeSnippet]) -> Self {
        let mut labels = Vec::new();
        let mut index = HashMap::new();
        for s in corpus {
            if !index.contains_key(s.label.as_str()) {
                index.insert(s.label.clone(), labels.len());
                labels.push(s.label.clone());
            }
        }
        LabelSet { labels, index }
    }

    /// Rebuilds a label set from an ordered list (e.g. a dump).
    pub fn from_labels(labels: Vec<String>) -> Result<Self, CorpusError> {
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(CorpusError::InvalidVocab(format!("duplicate label `{l}`")));
            }
        }
        Ok(LabelSet { labels, index })
    }

    /// Number of labels |L|.
    #[must_use]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Returns `true` when no labels are present.
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The label at `index`.
    #[must_use]
    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }

    /// The index of `label`, or `None` when absent.
    #[must_use]
    pub fn lookup(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Ordered view of all labels.
    #[must_use]
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// SHA-256 over the ordered label list (checkpoint compatibility check).
    #[must_use]
    pub fn hash_hex(&self) -> String {
        hash_strings(&self.labels)
    }

    /// Writes the label set as newline-delimited `{token, index}` records.
    pub fn dump(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = String::new();
        for (i, l) in self.labels.iter().enumerate() {
            let rec = IndexRecord {
                token: l.clone(),
                index: i,
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("serialize"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Loads a label-set dump.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let vocab = Vocabulary::load(path)?;
        Self::from_labels(vocab.tokens)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    token: String,
    index: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    id: String,
    code: String,
    label: String,
}

/// Loads a dataset: newline-delimited JSON records `{id, code, label}`.
///
/// Order is preserved, ids must be distinct, and every snippet must satisfy
/// the [`CodeSnippet`] invariants. Blank lines are ignored. Errors name the
/// offending 1-based line number.
pub fn load_dataset(path: &Path) -> Result<Vec<CodeSnippet>, CorpusError> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

/// Parses dataset text; see [`load_dataset`].
pub fn parse_dataset(text: &str) -> Result<Vec<CodeSnippet>, CorpusError> {
    let mut snippets = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedLine {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        let snippet =
            CodeSnippet::from_code(&rec.id, &rec.code, &rec.label).map_err(|e| {
                CorpusError::MalformedLine {
                    line: lineno + 1,
                    reason: e.to_string(),
                }
            })?;
        if !seen.insert(snippet.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: lineno + 1,
                id: snippet.id,
            });
        }
        snippets.push(snippet);
    }
    Ok(snippets)
}

/// Writes a dataset in the record format read by [`load_dataset`].
pub fn save_dataset(path: &Path, snippets: &[CodeSnippet]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for s in snippets {
        let rec = DatasetRecord {
            id: s.id.clone(),
            code: s.render_tokens(),
            label: s.label.clone(),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&rec).expect("serialize"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Derives a per-item seed from a run seed and an item tag (e.g. a snippet
/// id), so batch items are independent yet individually reproducible.
#[must_use]
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn hash_strings(items: &[String]) -> String {
    let mut hasher = Sha256::new();
    for s in items {
        hasher.update(s.as_bytes());
        hasher.update([b'\n']);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

/// Generates a deterministic synthetic fixture corpus of `count` snippets over
/// at most `label_count` distinct function names.
///
/// Each label owns a pair of marker identifiers that appear as parameters,
/// locals, and call arguments of its snippets, so a pooled-embedding
/// classifier can separate the labels while shared filler identifiers,
/// boolean literals, and field assignments keep all six perturbation-site
/// kinds present in the streams.
#[must_use]
pub fn synthesize_corpus(count: usize, label_count: usize, seed: u64) -> Vec<CodeSnippet> {
    const VERBS: [&str; 10] = [
        "get", "set", "update", "reset", "load", "save", "parse", "render", "merge", "check",
    ];
    const NOUNS: [&str; 5] = ["value", "name", "state", "buffer", "index"];
    const FILLERS: [&str; 8] = [
        "options", "payload", "extra", "source", "target", "result", "item", "entry",
    ];
    const FIELDS: [&str; 6] = ["data", "cache", "flag", "size", "mode", "owner"];

    let label_count = label_count.clamp(1, VERBS.len() * NOUNS.len());
    let labels: Vec<String> = (0..label_count)
        .map(|i| format!("{}_{}", VERBS[i % VERBS.len()], NOUNS[i / VERBS.len()]))
        .collect();

    let mut corpus = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("syn{i:04}");
        let label = &labels[i % labels.len()];
        let marker_arg = format!("{}_arg", label);
        let marker_tmp = format!("{}_tmp", label);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &id));
        let filler = FILLERS[rng.gen_range(0..FILLERS.len())];
        let field_a = FIELDS[rng.gen_range(0..FIELDS.len())];
        let field_b = FIELDS[(rng.gen_range(0..FIELDS.len() - 1) + 1
            + FIELDS.iter().position(|f| *f == field_a).unwrap())
            % FIELDS.len()];

        let mut toks: Vec<String> = Vec::new();
        // Signature: ( self <marker_arg> <filler> = none ) :
        toks.extend(
            ["(", "self", marker_arg.as_str(), filler, "=", "none", ")", ":"]
                .map(str::to_owned),
        );
        // self . <field_a> = <marker_arg>
        toks.extend(["self", ".", field_a, "=", marker_arg.as_str()].map(str::to_owned));
        // <marker_tmp> = list ( <marker_arg> )
        toks.extend(
            [marker_tmp.as_str(), "=", "list", "(", marker_arg.as_str(), ")"]
                .map(str::to_owned),
        );
        if rng.gen_bool(0.5) {
            // if <filler> : self . <field_b> = true|false
            let lit = if rng.gen_bool(0.5) { "true" } else { "false" };
            toks.extend(["if", filler, ":", "self", ".", field_b, "=", lit].map(str::to_owned));
        } else {
            // self . <field_b> = <marker_tmp>
            toks.extend(["self", ".", field_b, "=", marker_tmp.as_str()].map(str::to_owned));
        }
        // self . <field_a> = int ( <marker_tmp> )
        toks.extend(
            ["self", ".", field_a, "=", "int", "(", marker_tmp.as_str(), ")"]
                .map(str::to_owned),
        );
        corpus.push(CodeSnippet::new(id, toks, label.clone()).expect("synthetic snippet valid"));
    }
    corpus
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo;

    #[test]
    fn load_example_stream() {
        let line = format!(
            "{}\n",
            serde_json::to_string(&DatasetRecord {
                id: "ex".into(),
                code: demo::EXAMPLE_CODE.into(),
                label: demo::EXAMPLE_LABEL.into(),
            })
            .unwrap()
        );
        let snippets = parse_dataset(&line).unwrap();
        assert_eq!(snippets.len(), 1);
        assert_eq!(snippets[0].tokens[0], "(");
        assert_eq!(snippets[0].label, "__init__");
        assert_eq!(snippets[0].render_tokens(), demo::EXAMPLE_CODE);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        assert!(parse_dataset("").unwrap().is_empty());
        assert!(parse_dataset("\n\n").unwrap().is_empty());
    }

    #[test]
    fn thousand_records_round_trip() {
        let corpus = synthesize_corpus(1000, 50, 7);
        assert_eq!(corpus.len(), 1000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_dataset(&path, &corpus).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, corpus);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_dataset("{\"id\":\"a\",\"code\":\"x\",\"label\":\"f\"}\nnot json\n")
            .unwrap_err();
        match err {
            CorpusError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let rec = "{\"id\":\"a\",\"code\":\"x\",\"label\":\"f\"}";
        let err = parse_dataset(&format!("{rec}\n{rec}\n")).unwrap_err();
        match err {
            CorpusError::DuplicateId { line, id } => {
                assert_eq!(line, 2);
                assert_eq!(id, "a");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn snippet_invariants_enforced() {
        assert!(CodeSnippet::from_code("a", "", "f").is_err());
        assert!(CodeSnippet::from_code("a", "x", "").is_err());
        assert!(CodeSnippet::new("a".into(), vec!["x y".into()], "f".into()).is_err());
    }

    #[test]
    fn dictionary_contains_true_label_once() {
        let all: Vec<String> = (0..40).map(|i| format!("name{i}")).collect();
        let dict = build_dictionary("name7", &all, 10, 3);
        assert_eq!(dict.labels.len(), 10);
        assert_eq!(
            dict.labels.iter().filter(|l| *l == "name7").count(),
            1
        );
        assert_eq!(dict.labels[dict.true_label_index], "name7");
        assert!(!dict.truncated);
    }

    #[test]
    fn dictionary_clamps_and_flags() {
        let all = vec!["only".to_owned()];
        let dict = build_dictionary("only", &all, 500, 0);
        assert_eq!(dict.labels, vec!["only".to_owned()]);
        assert!(dict.truncated);
    }

    #[test]
    fn dictionary_deterministic_per_seed() {
        let all: Vec<String> = (0..100).map(|i| format!("name{i}")).collect();
        let a = build_dictionary("name3", &all, 20, 42);
        let b = build_dictionary("name3", &all, 20, 42);
        assert_eq!(a, b);
        let c = build_dictionary("name3", &all, 20, 43);
        assert_ne!(a, c, "different seed should reshuffle");
    }

    #[test]
    fn vocab_dedups_and_orders() {
        let corpus = vec![
            CodeSnippet::from_code("s1", "a b a", "f").unwrap(),
        ];
        let vocab = Vocabulary::build(&corpus, &[]);
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.token(0), Some("a"));
        assert_eq!(vocab.token(1), Some("b"));
    }

    #[test]
    fn vocab_extra_tokens_present() {
        let corpus = vec![CodeSnippet::from_code("s1", "a b", "f").unwrap()];
        let vocab = Vocabulary::build(&corpus, &["traverse".to_owned()]);
        assert!(vocab.lookup("traverse").is_some());
    }

    #[test]
    fn vocab_rebuild_identical() {
        let corpus = synthesize_corpus(50, 10, 1);
        let a = Vocabulary::build(&corpus, &[]);
        let b = Vocabulary::build(&corpus, &[]);
        assert_eq!(a.tokens(), b.tokens());
        assert_eq!(a.hash_hex(), b.hash_hex());
    }

    #[test]
    fn vocab_oov_maps_to_sentinel() {
        let corpus = vec![CodeSnippet::from_code("s1", "a b", "f").unwrap()];
        let vocab = Vocabulary::build(&corpus, &[]);
        assert_eq!(vocab.index_or_sentinel("zzz"), 0);
        assert_eq!(vocab.index_or_sentinel("b"), 1);
    }

    #[test]
    fn vocab_dump_load_round_trip() {
        let corpus = synthesize_corpus(20, 5, 9);
        let vocab = Vocabulary::build(&corpus, &[]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.jsonl");
        vocab.dump(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.tokens(), vocab.tokens());
    }

    #[test]
    fn label_set_first_occurrence_order() {
        let corpus = vec![
            CodeSnippet::from_code("s1", "x", "beta").unwrap(),
            CodeSnippet::from_code("s2", "x", "alpha").unwrap(),
            CodeSnippet::from_code("s3", "x", "beta").unwrap(),
        ];
        let labels = LabelSet::build(&corpus);
        assert_eq!(labels.labels(), ["beta".to_owned(), "alpha".to_owned()]);
        assert_eq!(labels.lookup("alpha"), Some(1));
    }

    #[test]
    fn mix_seed_is_stable_and_id_sensitive() {
        assert_eq!(mix_seed(1, "a"), mix_seed(1, "a"));
        assert_ne!(mix_seed(1, "a"), mix_seed(1, "b"));
        assert_ne!(mix_seed(1, "a"), mix_seed(2, "a"));
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = synthesize_corpus(30, 8, 5);
        let b = synthesize_corpus(30, 8, 5);
        assert_eq!(a, b);
        let ids: HashSet<_> = a.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids.len(), 30);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            // Rendering then splitting on whitespace reproduces the tokens.
            #[test]
            fn prop_render_round_trips(tokens in proptest::collection::vec("[!-~]{1,8}", 1..50)) {
                let snippet = CodeSnippet::new("p".into(), tokens.clone(), "f".into()).unwrap();
                let rendered = snippet.render_tokens();
                let split: Vec<String> = rendered.split_whitespace().map(str::to_owned).collect();
                prop_assert_eq!(split, tokens);
            }

            // index(token(i)) == i for all i: the vocabulary is a bijection.
            #[test]
            fn prop_vocab_bijection(tokens in proptest::collection::vec("[a-z]{1,6}", 1..60)) {
                let corpus = vec![CodeSnippet::new("p".into(), tokens, "f".into()).unwrap()];
                let vocab = Vocabulary::build(&corpus, &[]);
                for i in 0..vocab.len() {
                    let t = vocab.token(i).unwrap();
                    prop_assert_eq!(vocab.lookup(t), Some(i));
                }
            }

            // Dictionary sampling is a pure function of (inputs, seed).
            #[test]
            fn prop_dictionary_deterministic(seed in 0u64..1000, size in 1usize..30) {
                let all: Vec<String> = (0..40).map(|i| format!("n{i}")).collect();
                let a = build_dictionary("n5", &all, size, seed);
                let b = build_dictionary("n5", &all, size, seed);
                prop_assert_eq!(a, b);
            }
        }
    }
}
