//! Corpus ingestion: cleaning, tokenization, vocabulary construction, and
//! the labelled train/test document set.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

/// The bundled English stop-word list (179 entries, one per line).
pub const DEFAULT_STOP_WORDS: &str = include_str!("../assets/stopwords_en.txt");

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus i/o: {0}")]
    Io(#[from] io::Error),
    #[error("texts file has {texts} lines but meta file has {meta}")]
    LineCountMismatch { texts: usize, meta: usize },
    #[error("meta line {line}: expected `id<TAB>split<TAB>label`")]
    MalformedMeta { line: usize },
    #[error("meta line {line}: cannot parse id {id:?}")]
    BadId { line: usize, id: String },
    #[error("meta line {line}: unknown split token {split:?} (expected train or test)")]
    UnknownSplit { line: usize, split: String },
    #[error("duplicate document id {id}")]
    DuplicateId { id: usize },
    #[error("document ids are not dense 0..{expected} (missing id {missing})")]
    NonDenseIds { expected: usize, missing: usize },
    #[error("vocabulary is empty after applying min_freq={min_freq}")]
    EmptyVocabulary { min_freq: usize },
    #[error("corpus has fewer than two labels")]
    TooFewLabels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Text-cleaning configuration applied before tokenization.
///
/// Defaults: lowercase, replace every non-alphanumeric character with a
/// space (hyphenated words therefore split into their parts), then drop
/// tokens found in the stop-word list.
#[derive(Clone, Debug)]
pub struct CleaningRules {
    pub lowercase: bool,
    pub strip_punctuation: bool,
    pub stop_words: HashSet<String>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        CleaningRules {
            lowercase: true,
            strip_punctuation: true,
            stop_words: DEFAULT_STOP_WORDS
                .lines()
                .map(|w| w.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect(),
        }
    }
}

impl CleaningRules {
    /// Rules with a caller-supplied stop-word file (one word per line).
    pub fn with_stop_words_file(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path)?;
        Ok(CleaningRules {
            stop_words: text
                .lines()
                .map(|w| w.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect(),
            ..CleaningRules::default()
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Document {
    pub id: usize,
    pub tokens: Vec<String>,
    /// Dense label index into `Corpus::labels`.
    pub label: usize,
    pub split: Split,
}

/// Word/index bijection with per-word document frequencies and total
/// occurrence counts.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Vocabulary {
    words: Vec<String>,
    doc_freq: Vec<u32>,
    total_count: Vec<u64>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn doc_freq(&self, id: u32) -> u32 {
        self.doc_freq[id as usize]
    }

    pub fn total_count(&self, id: u32) -> u64 {
        self.total_count[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocabulary: Vocabulary,
    /// Label strings in first-appearance order.
    pub labels: Vec<String>,
}

impl Corpus {
    pub fn n_docs(&self) -> usize {
        self.documents.len()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn train_ids(&self) -> Vec<usize> {
        self.documents
            .iter()
            .filter(|d| d.split == Split::Train)
            .map(|d| d.id)
            .collect()
    }

    pub fn test_ids(&self) -> Vec<usize> {
        self.documents
            .iter()
            .filter(|d| d.split == Split::Test)
            .map(|d| d.id)
            .collect()
    }

    /// Canonical serialization; identical corpora serialize identically.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("corpus serialization cannot fail")
    }
}

/// Clean one raw document and split it into tokens.
///
/// Total on strings: empty input gives an empty list.
pub fn clean_and_tokenize(raw: &str, rules: &CleaningRules) -> Vec<String> {
    let lowered;
    let text = if rules.lowercase {
        lowered = raw.to_lowercase();
        &lowered
    } else {
        raw
    };
    let stripped;
    let text = if rules.strip_punctuation {
        stripped = text
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { ' ' })
            .collect::<String>();
        &stripped
    } else {
        text
    };
    text.split_whitespace()
        .filter(|t| !rules.stop_words.contains(*t))
        .map(str::to_string)
        .collect()
}

/// Build the vocabulary over words appearing in at least `min_freq`
/// documents, then drop out-of-vocabulary tokens from every document.
///
/// Word indices follow first appearance across documents in id order.
pub fn build_vocabulary(
    documents: &mut [Document],
    min_freq: usize,
) -> Result<Vocabulary, CorpusError> {
    assert!(min_freq >= 1, "min_freq must be at least 1");
    let mut first_seen: Vec<String> = Vec::new();
    let mut doc_freq: HashMap<&str, u32> = HashMap::new();
    let mut total: HashMap<&str, u64> = HashMap::new();
    let mut seen_order: HashSet<&str> = HashSet::new();
    for doc in documents.iter() {
        let mut in_doc: HashSet<&str> = HashSet::new();
        for tok in &doc.tokens {
            *total.entry(tok).or_insert(0) += 1;
            if in_doc.insert(tok) {
                *doc_freq.entry(tok).or_insert(0) += 1;
            }
            if seen_order.insert(tok) {
                first_seen.push(tok.clone());
            }
        }
    }

    let mut vocab = Vocabulary::default();
    for word in &first_seen {
        if doc_freq[word.as_str()] as usize >= min_freq {
            vocab.words.push(word.clone());
            vocab.doc_freq.push(doc_freq[word.as_str()]);
            vocab.total_count.push(total[word.as_str()]);
        }
    }
    if vocab.words.is_empty() {
        return Err(CorpusError::EmptyVocabulary { min_freq });
    }
    vocab.rebuild_index();

    for doc in documents.iter_mut() {
        doc.tokens.retain(|t| vocab.index.contains_key(t));
    }
    Ok(vocab)
}

/// Load a corpus from a texts file (one document per line) and a meta file
/// (`id<TAB>split<TAB>label` per line).
pub fn load_corpus(
    texts_path: &Path,
    meta_path: &Path,
    rules: &CleaningRules,
    min_freq: usize,
) -> Result<Corpus, CorpusError> {
    let texts = fs::read_to_string(texts_path)?;
    let meta = fs::read_to_string(meta_path)?;
    load_corpus_from_strings(&texts, &meta, rules, min_freq)
}

pub fn load_corpus_from_strings(
    texts: &str,
    meta: &str,
    rules: &CleaningRules,
    min_freq: usize,
) -> Result<Corpus, CorpusError> {
    let text_lines: Vec<&str> = texts.lines().collect();
    let meta_lines: Vec<&str> = meta.lines().collect();
    if text_lines.len() != meta_lines.len() {
        return Err(CorpusError::LineCountMismatch {
            texts: text_lines.len(),
            meta: meta_lines.len(),
        });
    }

    let mut labels: Vec<String> = Vec::new();
    let mut label_index: HashMap<String, usize> = HashMap::new();
    let mut documents: Vec<Document> = Vec::with_capacity(text_lines.len());
    let mut seen_ids: HashSet<usize> = HashSet::new();

    for (lineno, (text, meta_line)) in text_lines.iter().zip(&meta_lines).enumerate() {
        let mut fields = meta_line.split('\t');
        let (id_s, split_s, label_s) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(CorpusError::MalformedMeta { line: lineno + 1 }),
        };
        let id: usize = id_s.trim().parse().map_err(|_| CorpusError::BadId {
            line: lineno + 1,
            id: id_s.to_string(),
        })?;
        let split = match split_s.trim() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(CorpusError::UnknownSplit {
                    line: lineno + 1,
                    split: other.to_string(),
                })
            }
        };
        if !seen_ids.insert(id) {
            return Err(CorpusError::DuplicateId { id });
        }
        let label_s = label_s.trim().to_string();
        let label = match label_index.get(&label_s) {
            Some(&l) => l,
            None => {
                let l = labels.len();
                labels.push(label_s.clone());
                label_index.insert(label_s, l);
                l
            }
        };
        documents.push(Document {
            id,
            tokens: clean_and_tokenize(text, rules),
            label,
            split,
        });
    }

    for want in 0..documents.len() {
        if !seen_ids.contains(&want) {
            return Err(CorpusError::NonDenseIds {
                expected: documents.len(),
                missing: want,
            });
        }
    }
    documents.sort_by_key(|d| d.id);

    if labels.len() < 2 {
        return Err(CorpusError::TooFewLabels);
    }

    let vocabulary = build_vocabulary(&mut documents, min_freq)?;
    Ok(Corpus {
        documents,
        vocabulary,
        labels,
    })
}
