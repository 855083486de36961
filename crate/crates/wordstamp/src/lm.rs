//! Language models for shallow fusion during decoding.
//!
//! The decoder treats the LM as pluggable: anything that scores a next
//! word given the words emitted so far, plus an entity flag used by the
//! class-weight bonus (entities here are the dynamically interesting
//! words, e.g. names, that deserve an acoustic boost).

use std::collections::HashSet;

/// Word indices are 0-based positions in the decoding vocabulary.
pub trait Lm: Sync {
    /// Log-probability of `next` following `history`.
    fn log_prob(&self, history: &[usize], next: usize) -> f64;

    /// Whether `word` belongs to the boosted entity class.
    fn is_entity(&self, word: usize) -> bool {
        let _ = word;
        false
    }
}

/// Uniform LM: every word equally likely regardless of history.  With a
/// nonzero fusion weight it acts as a word insertion penalty.
#[derive(Debug, Clone)]
pub struct UniformLm {
    vocab_size: usize,
    entities: HashSet<usize>,
}

impl UniformLm {
    pub fn new(vocab_size: usize) -> Self {
        UniformLm { vocab_size: vocab_size.max(1), entities: HashSet::new() }
    }

    pub fn with_entities(mut self, entities: HashSet<usize>) -> Self {
        self.entities = entities;
        self
    }
}

impl Lm for UniformLm {
    fn log_prob(&self, _history: &[usize], _next: usize) -> f64 {
        -(self.vocab_size as f64).ln()
    }

    fn is_entity(&self, word: usize) -> bool {
        self.entities.contains(&word)
    }
}

/// Bigram LM with add-one smoothing, trained on transcripts.  History
/// beyond the most recent word is ignored; an empty history uses the
/// sentence-start context.
#[derive(Debug, Clone)]
pub struct BigramLm {
    vocab_size: usize,
    // counts[h][w] where h = 0 is sentence start and h = w + 1 otherwise.
    counts: Vec<Vec<u32>>,
    totals: Vec<u32>,
    entities: HashSet<usize>,
}

impl BigramLm {
    pub fn train(transcripts: &[Vec<usize>], vocab_size: usize) -> Self {
        let mut counts = vec![vec![0u32; vocab_size]; vocab_size + 1];
        let mut totals = vec![0u32; vocab_size + 1];
        for sent in transcripts {
            let mut ctx = 0usize;
            for &w in sent {
                debug_assert!(w < vocab_size);
                counts[ctx][w] += 1;
                totals[ctx] += 1;
                ctx = w + 1;
            }
        }
        BigramLm { vocab_size, counts, totals, entities: HashSet::new() }
    }

    pub fn with_entities(mut self, entities: HashSet<usize>) -> Self {
        self.entities = entities;
        self
    }
}

impl Lm for BigramLm {
    fn log_prob(&self, history: &[usize], next: usize) -> f64 {
        let ctx = history.last().map_or(0, |&w| w + 1);
        let num = self.counts[ctx][next] as f64 + 1.0;
        let den = self.totals[ctx] as f64 + self.vocab_size as f64;
        (num / den).ln()
    }

    fn is_entity(&self, word: usize) -> bool {
        self.entities.contains(&word)
    }
}
