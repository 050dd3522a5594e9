//! Seeded synthetic corpora for experiments and tests.
//!
//! Generators emit raw text/meta file contents in the loader's format so
//! the same data can drive both library calls and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{load_corpus_from_strings, CleaningRules, Corpus};

/// Raw corpus files: one document per text line, `id<TAB>split<TAB>label`
/// per meta line.
#[derive(Clone, Debug)]
pub struct RawCorpus {
    pub texts: String,
    pub meta: String,
}

impl RawCorpus {
    pub fn load(&self, min_freq: usize) -> Corpus {
        load_corpus_from_strings(&self.texts, &self.meta, &CleaningRules::default(), min_freq)
            .expect("synthetic corpora always load")
    }
}

/// Two classes with disjoint vocabularies; linearly separable through the
/// document–word edges alone.
///
/// `n_docs` splits evenly between the classes; within each class, 70% of
/// documents are train and the rest test.
pub fn separable(n_docs: usize, seed: u64) -> RawCorpus {
    assert!(n_docs >= 4 && n_docs.is_multiple_of(2), "need an even corpus of at least 4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = n_docs / 2;
    let n_train = (per_class * 7) / 10;
    let vocab_size = 8usize;

    let mut texts = String::new();
    let mut meta = String::new();
    let mut id = 0usize;
    for class in 0..2 {
        let prefix = if class == 0 { "alpha" } else { "beta" };
        for i in 0..per_class {
            let len = rng.gen_range(8..14);
            let tokens: Vec<String> = (0..len)
                .map(|_| format!("{prefix}{}", rng.gen_range(0..vocab_size)))
                .collect();
            texts.push_str(&tokens.join(" "));
            texts.push('\n');
            let split = if i < n_train { "train" } else { "test" };
            let label = if class == 0 { "pos" } else { "neg" };
            meta.push_str(&format!("{id}\t{split}\t{label}\n"));
            id += 1;
        }
    }
    RawCorpus { texts, meta }
}

/// Two classes whose signal lives in word–word co-occurrence
/// neighborhoods: each class has six signal words that appear only in its
/// documents and co-occur with each other there, building two same-class
/// PMI clusters. Each document also repeats one class-neutral distractor
/// word shared across classes; its count and low document frequency give
/// it a dominant TF-IDF edge weight, so fixed-weight propagation leans on
/// a node with no class information while learned attention can suppress
/// it.
pub fn cooccurrence(n_docs: usize, seed: u64) -> RawCorpus {
    assert!(n_docs >= 8 && n_docs.is_multiple_of(2), "need an even corpus of at least 8");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = n_docs / 2;
    let n_train = (per_class * 7) / 10;
    let signal_words = 6usize;
    let n_distractors = 6usize;

    let mut texts = String::new();
    let mut meta = String::new();
    let mut id = 0usize;
    for class in 0..2 {
        let prefix = if class == 0 { "evn" } else { "odd" };
        for i in 0..per_class {
            let mut tokens: Vec<String> = (0..6)
                .map(|_| format!("{prefix}{}", rng.gen_range(0..signal_words)))
                .collect();
            // Round-robin keeps every distractor exactly class-balanced.
            let distractor = format!("rare{}", i % n_distractors);
            for _ in 0..6 {
                tokens.push(distractor.clone());
            }
            texts.push_str(&tokens.join(" "));
            texts.push('\n');
            let split = if i < n_train { "train" } else { "test" };
            let label = if class == 0 { "even" } else { "odd" };
            meta.push_str(&format!("{id}\t{split}\t{label}\n"));
            id += 1;
        }
    }
    RawCorpus { texts, meta }
}
