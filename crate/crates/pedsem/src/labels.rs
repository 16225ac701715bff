//! Semantic label mining: free-text teacher annotations in, fixed
//! vocabulary and multi-hot supervision targets out.
//!
//! Uni-grams and adjacent bi-grams are counted over stopword-filtered
//! tokens (bi-grams never span sentence breaks), ranked by frequency,
//! and each annotation becomes a binary presence vector over the
//! resulting label set.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

/// One teacher response tied to an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub image_id: String,
    pub text: String,
}

impl Annotation {
    pub fn new(image_id: impl Into<String>, text: impl Into<String>) -> Self {
        Annotation {
            image_id: image_id.into(),
            text: text.into(),
        }
    }
}

const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "may", "me", "might", "more", "most", "must", "my", "myself", "near", "no", "nor", "not",
    "now", "of", "off", "on", "once", "one", "only", "or", "other", "our", "ours", "ourselves",
    "out", "over", "own", "same", "she", "should", "so", "some", "such", "than", "that", "the",
    "their", "theirs", "them", "themselves", "then", "there", "these", "they", "this", "those",
    "through", "to", "too", "under", "until", "up", "very", "was", "we", "were", "what", "when",
    "where", "which", "while", "who", "whom", "why", "will", "with", "would", "you", "your",
    "yours", "yourself", "yourselves",
];

/// "-ly" words that are not adverbs and must survive the heuristic.
const ADVERB_EXCEPTIONS: &[&str] = &["assembly", "early", "elderly", "family", "friendly"];

/// Stopword list plus the "-ly" adverb heuristic. Vocabularies remember
/// the configuration they were built with so encoding stays consistent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub stopwords: BTreeSet<String>,
    pub adverb_exceptions: BTreeSet<String>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
            adverb_exceptions: ADVERB_EXCEPTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TokenizerConfig {
    fn is_content(&self, token: &str) -> bool {
        if token.len() < 2 || self.stopwords.contains(token) {
            return false;
        }
        if token.ends_with("ly") && !self.adverb_exceptions.contains(token) {
            return false; // adverb heuristic
        }
        true
    }
}

/// Lowercased, punctuation-stripped content tokens, one list per sentence.
/// Sentence boundaries act as bi-gram breaks.
pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<Vec<String>> {
    let mut sentences = Vec::new();
    for raw in text.split(['.', '!', '?', ';']) {
        let tokens: Vec<String> = raw
            .split(|c: char| !c.is_alphanumeric())
            .map(|t| t.to_lowercase())
            .filter(|t| cfg.is_content(t))
            .collect();
        if !tokens.is_empty() {
            sentences.push(tokens);
        }
    }
    sentences
}

/// Flattened convenience over [`tokenize`].
pub fn content_tokens(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    tokenize(text, cfg).into_iter().flatten().collect()
}

/// Ordered label set: uni-grams and space-joined bi-gram phrases, sorted by
/// (frequency desc, label asc), truncated to the configured maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    labels: Vec<String>,
    frequencies: Vec<u64>,
    index: BTreeMap<String, usize>,
    tokenizer: TokenizerConfig,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn tokenizer(&self) -> &TokenizerConfig {
        &self.tokenizer
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (label, freq) in self.labels.iter().zip(&self.frequencies) {
            out.push_str(label);
            out.push('\t');
            out.push_str(&freq.to_string());
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a rank-ordered `label<TAB>frequency` file. The tokenizer
    /// configuration is the bundled default.
    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = std::fs::read_to_string(path)?;
        let mut labels = Vec::new();
        let mut frequencies = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (label, freq) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: expected label<TAB>frequency", lineno + 1),
            })?;
            let freq: u64 = freq.parse().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                detail: format!("line {}: bad frequency: {e}", lineno + 1),
            })?;
            labels.push(label.to_string());
            frequencies.push(freq);
        }
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Ok(Vocabulary {
            labels,
            frequencies,
            index,
            tokenizer: TokenizerConfig::default(),
        })
    }
}

/// Multi-hot target over a vocabulary: y\[i\] = 1 iff label i appears in
/// the teacher's output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    bits: Vec<u8>,
}

impl LabelVector {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    /// Indices of the set bits, ascending.
    pub fn set_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| (b == 1).then_some(i))
            .collect()
    }
}

/// Counts uni-grams and adjacent bi-grams over the tokenized corpus and
/// keeps the `max_size` most frequent, ties broken lexicographically.
pub fn build_vocabulary(
    corpus: &[Annotation],
    max_size: usize,
    cfg: &TokenizerConfig,
) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::contract("build_vocabulary", "empty corpus"));
    }
    if max_size == 0 {
        return Err(Error::contract("build_vocabulary", "max_size must be >= 1"));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for ann in corpus {
        for sentence in tokenize(&ann.text, cfg) {
            for token in &sentence {
                *counts.entry(token.clone()).or_insert(0) += 1;
            }
            for pair in sentence.windows(2) {
                *counts.entry(format!("{} {}", pair[0], pair[1])).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size);

    let labels: Vec<String> = ranked.iter().map(|(l, _)| l.clone()).collect();
    let frequencies: Vec<u64> = ranked.iter().map(|(_, f)| *f).collect();
    let index = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect();
    Ok(Vocabulary {
        labels,
        frequencies,
        index,
        tokenizer: cfg.clone(),
    })
}

/// y\[i\] = 1 iff label i occurs in the annotation: token match for
/// uni-grams, adjacent-token match (within a sentence) for phrases.
pub fn encode_labels(annotation: &Annotation, vocab: &Vocabulary) -> LabelVector {
    let sentences = tokenize(&annotation.text, &vocab.tokenizer);
    let mut present: BTreeSet<&str> = BTreeSet::new();
    for sentence in &sentences {
        for token in sentence {
            present.insert(token.as_str());
        }
    }
    let mut bits = vec![0u8; vocab.size()];
    for (i, label) in vocab.labels.iter().enumerate() {
        match label.split_once(' ') {
            None => {
                if present.contains(label.as_str()) {
                    bits[i] = 1;
                }
            }
            Some((first, second)) => {
                let hit = sentences.iter().any(|s| {
                    s.windows(2).any(|w| w[0] == first && w[1] == second)
                });
                if hit {
                    bits[i] = 1;
                }
            }
        }
    }
    LabelVector { bits }
}

/// Writes `image_id<TAB>text` per line.
pub fn save_corpus(corpus: &[Annotation], path: &Path) -> Result<()> {
    let mut out = String::new();
    for ann in corpus {
        out.push_str(&ann.image_id);
        out.push('\t');
        out.push_str(&ann.text);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an annotation corpus; records with empty text after trimming are
/// skipped with a warning, per the ingestion policy.
pub fn load_corpus(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path)?;
    let mut corpus = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, body) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            detail: format!("line {}: expected image_id<TAB>text", lineno + 1),
        })?;
        if body.trim().is_empty() {
            skipped += 1;
            continue;
        }
        corpus.push(Annotation::new(id, body));
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} empty-text records", path.display());
    }
    Ok(corpus)
}
