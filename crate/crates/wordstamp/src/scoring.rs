//! Embedding-matching frame scores.
//!
//! A frame is scored against every vocabulary word as the negated squared
//! Euclidean distance between the frame's predicted embedding and the
//! word's text embedding.  Index 0 of every score vector is the blank
//! symbol, scored as the negated square of a learned magnitude, so a score
//! vector over `n` words has `n + 1` entries.  With `L > 1` embeddings per
//! frame the per-word score is the sum of the per-embedding scores.
//!
//! Timestamped scoring additionally penalizes each word score by the
//! squared distance between the frame's predicted (start, duration) and
//! the vocabulary entry's timestamp, through the combiner [`z_combine`].

use crate::textio::fmt_f64;
use crate::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

/// A word's (start, duration) pair, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timestamp {
    pub start: f64,
    pub duration: f64,
}

impl Timestamp {
    pub fn new(start: f64, duration: f64) -> Self {
        Timestamp { start, duration }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Squared Euclidean distance between two timestamps, the penalty fed to
/// [`z_combine`].
pub fn timestamp_distance(a: Timestamp, b: Timestamp) -> f64 {
    let ds = a.start - b.start;
    let dd = a.duration - b.duration;
    ds * ds + dd * dd
}

/// Dense word-embedding table with unique string ids.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        Ok(EmbeddingMatrix { dim, ids: Vec::new(), vectors: Vec::new(), index: HashMap::new() })
    }

    pub fn push(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if vector.len() != self.dim {
            return Err(Error::DimMismatch { expected: self.dim, got: vector.len() });
        }
        if id.split_whitespace().count() != 1 {
            return Err(Error::invalid(format!("word id {id:?} must be a single token")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::invalid(format!("duplicate word id {id:?}")));
        }
        self.index.insert(id.clone(), self.vectors.len());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of words (the blank is not an entry).
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Vector of the `i`-th word, 0-based.
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(|s| s.as_str()).zip(self.vectors.iter().map(|v| v.as_slice()))
    }

    /// Serialize as text: a `dim n` header line, then one `id v_1 .. v_dim`
    /// line per word.  Values round-trip exactly.
    pub fn write_text(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {}", self.dim, self.len())?;
        for (id, vec) in self.iter() {
            write!(w, "{id}")?;
            for x in vec {
                write!(w, " {}", fmt_f64(*x))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty embedding file"))?;
        let header = header?;
        let mut parts = header.split_whitespace();
        let dim: usize = crate::textio::parse_field(
            parts.next().ok_or_else(|| Error::parse(1, "missing dim"))?,
            1,
            "dim",
        )?;
        let count: usize = crate::textio::parse_field(
            parts.next().ok_or_else(|| Error::parse(1, "missing word count"))?,
            1,
            "word count",
        )?;
        let mut out = EmbeddingMatrix::new(dim)?;
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id = fields.next().ok_or_else(|| Error::parse(line_no, "missing word id"))?;
            let vec = fields
                .map(|f| crate::textio::parse_field(f, line_no, "embedding value"))
                .collect::<Result<Vec<f64>>>()?;
            if vec.len() != dim {
                return Err(Error::parse(
                    line_no,
                    format!("expected {dim} embedding values, got {}", vec.len()),
                ));
            }
            out.push(id, vec).map_err(|e| Error::parse(line_no, e.to_string()))?;
        }
        if out.len() != count {
            return Err(Error::invalid(format!(
                "header promised {count} words, file contains {}",
                out.len()
            )));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_text(&mut buf)?;
        crate::textio::write_atomic(path, std::str::from_utf8(&buf).expect("ascii"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_text(std::io::BufReader::new(file))
    }
}

/// One frame of encoder output: `L` predicted embeddings, the two blank
/// magnitudes, and one predicted timestamp per embedding.
#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub embeddings: Vec<Vec<f64>>,
    /// Blank magnitude for the word score stream (blank score is `-blank^2`).
    pub blank: f64,
    /// Blank magnitude for the timestamped score stream.
    pub blank_z: f64,
    /// Predicted (start, duration) per embedding, same length as `embeddings`.
    pub stamps: Vec<Timestamp>,
}

impl FrameOutput {
    pub fn hypotheses(&self) -> usize {
        self.embeddings.len()
    }
}

/// One entry of a per-utterance sampled timestamped vocabulary.
#[derive(Debug, Clone)]
pub struct SampleEntry {
    /// Index of the word in the base [`EmbeddingMatrix`].
    pub word: usize,
    pub vector: Vec<f64>,
    pub stamp: Timestamp,
    /// True for the entries copied verbatim from the utterance reference.
    pub is_reference: bool,
}

/// Per-utterance timestamped vocabulary: references, perturbed copies of
/// them, and random negatives (see `sampler`).
#[derive(Debug, Clone, Default)]
pub struct TimestampedVocab {
    pub entries: Vec<SampleEntry>,
}

impl TimestampedVocab {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Single-embedding word scores: `values[0] = -blank^2`,
/// `values[i] = -||f - g_i||^2` for word `i` (1-based).
pub fn l2_scores(f: &[f64], vocab: &EmbeddingMatrix, blank: f64) -> Result<Vec<f64>> {
    multi_hyp_scores(std::slice::from_ref(&f.to_vec()), vocab, blank)
}

/// Multi-embedding word scores: the per-word score sums the per-embedding
/// negated squared distances, so any one embedding matching well keeps the
/// word competitive.
pub fn multi_hyp_scores(
    embeddings: &[Vec<f64>],
    vocab: &EmbeddingMatrix,
    blank: f64,
) -> Result<Vec<f64>> {
    if embeddings.is_empty() {
        return Err(Error::invalid("need at least one embedding per frame"));
    }
    for f in embeddings {
        if f.len() != vocab.dim() {
            return Err(Error::DimMismatch { expected: vocab.dim(), got: f.len() });
        }
    }
    let mut values = Vec::with_capacity(vocab.len() + 1);
    values.push(-(blank * blank));
    for i in 0..vocab.len() {
        let g = vocab.vector(i);
        values.push(-embeddings.iter().map(|f| squared_distance(f, g)).sum::<f64>());
    }
    Ok(values)
}

/// Inner-product word scores with both sides rescaled to squared norm `c`,
/// so `values[i] = f'^T g_i'` is at most `c`, with equality iff `f` and
/// `g_i` are parallel.  This score has no blank head; `values[0]` is fixed
/// at 0 so the vector keeps the shared blank-at-0 layout, and softmaxes
/// over this route should span `values[1..]`.
pub fn inner_product_scores(f: &[f64], vocab: &EmbeddingMatrix, c: f64) -> Result<Vec<f64>> {
    if f.len() != vocab.dim() {
        return Err(Error::DimMismatch { expected: vocab.dim(), got: f.len() });
    }
    if c <= 0.0 {
        return Err(Error::invalid("target squared norm c must be positive"));
    }
    let rescale = |v: &[f64]| -> Result<Vec<f64>> {
        let norm2 = v.iter().map(|x| x * x).sum::<f64>();
        if norm2 == 0.0 {
            return Err(Error::invalid("cannot rescale a zero vector"));
        }
        let s = (c / norm2).sqrt();
        Ok(v.iter().map(|x| x * s).collect())
    };
    let f = rescale(f)?;
    let mut values = Vec::with_capacity(vocab.len() + 1);
    values.push(0.0);
    for i in 0..vocab.len() {
        let g = rescale(vocab.vector(i))?;
        values.push(f.iter().zip(&g).map(|(x, y)| x * y).sum());
    }
    Ok(values)
}

/// Numerically stable log-softmax over a full score vector.
pub fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(max.is_finite(), "log_softmax needs at least one finite score");
    let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scores.iter().map(|s| s - lse).collect()
}

/// Combine a word score `s` with a timestamp penalty `d >= 0` as
/// `s - d + s*d`.  The result never exceeds `s`, equals `s` at `d = 0`,
/// and is strictly decreasing in `d` whenever `s < 1` (always true for
/// negated-squared-distance scores).
pub fn z_combine(s: f64, d: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::invalid(format!("timestamp penalty must be nonnegative, got {d}")));
    }
    Ok(s - d + s * d)
}

/// Timestamped scores for a single-embedding frame.  Entry 0 is
/// `-blank_z^2`; entry `i` combines the embedding score against entry
/// `i-1` of `vocab` with that entry's timestamp penalty.
pub fn timestamped_scores_single(
    frame: &FrameOutput,
    vocab: &TimestampedVocab,
) -> Result<Vec<f64>> {
    if frame.hypotheses() != 1 {
        return Err(Error::invalid(format!(
            "single-embedding scoring called with {} embeddings",
            frame.hypotheses()
        )));
    }
    Ok(timestamped_scores(frame, vocab)?.0)
}

/// Timestamped scores for a frame with any number of embeddings.
///
/// Per vocabulary entry the embedding score sums over embeddings; the
/// timestamp penalty uses the stamp of the best-scoring embedding (ties
/// resolved toward the lowest embedding index).  Returns the score vector
/// and, per entry, the selected embedding index.
pub fn timestamped_scores(
    frame: &FrameOutput,
    vocab: &TimestampedVocab,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let detail = timestamped_scores_detail(frame, vocab)?;
    Ok((detail.values, detail.selected))
}

/// Intermediates of [`timestamped_scores`], kept so training can
/// differentiate through the combiner without recomputing distances.
#[derive(Debug, Clone)]
pub struct StampScoreDetail {
    /// Combined score vector, blank at index 0.
    pub values: Vec<f64>,
    /// Selected embedding index per vocabulary entry.
    pub selected: Vec<usize>,
    /// Summed embedding score per entry (the `s` fed to [`z_combine`]).
    pub embed_score: Vec<f64>,
    /// Timestamp penalty per entry (the `d` fed to [`z_combine`]).
    pub penalty: Vec<f64>,
}

/// [`timestamped_scores`] plus the per-entry intermediates.
pub fn timestamped_scores_detail(
    frame: &FrameOutput,
    vocab: &TimestampedVocab,
) -> Result<StampScoreDetail> {
    if frame.embeddings.is_empty() {
        return Err(Error::invalid("need at least one embedding per frame"));
    }
    if frame.stamps.len() != frame.embeddings.len() {
        return Err(Error::invalid("one timestamp required per embedding"));
    }
    let n = vocab.len();
    let mut detail = StampScoreDetail {
        values: Vec::with_capacity(n + 1),
        selected: Vec::with_capacity(n),
        embed_score: Vec::with_capacity(n),
        penalty: Vec::with_capacity(n),
    };
    detail.values.push(-(frame.blank_z * frame.blank_z));
    for entry in &vocab.entries {
        if entry.vector.len() != frame.embeddings[0].len() {
            return Err(Error::DimMismatch {
                expected: frame.embeddings[0].len(),
                got: entry.vector.len(),
            });
        }
        let mut sum = 0.0;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, f) in frame.embeddings.iter().enumerate() {
            let s_k = -squared_distance(f, &entry.vector);
            sum += s_k;
            if s_k > best_score {
                best_score = s_k;
                best = k;
            }
        }
        let d = timestamp_distance(frame.stamps[best], entry.stamp);
        detail.values.push(z_combine(sum, d)?);
        detail.selected.push(best);
        detail.embed_score.push(sum);
        detail.penalty.push(d);
    }
    Ok(detail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab_2d() -> EmbeddingMatrix {
        let mut m = EmbeddingMatrix::new(2).unwrap();
        m.push("g1", vec![1.0, 0.0]).unwrap();
        m.push("g2", vec![0.0, 1.0]).unwrap();
        m
    }

    #[test]
    fn l2_scores_match_hand_computation() {
        let scores = l2_scores(&[1.0, 0.0], &vocab_2d(), 2.0).unwrap();
        assert_eq!(scores, vec![-4.0, 0.0, -2.0]);
    }

    #[test]
    fn l2_scores_reject_dim_mismatch() {
        assert!(l2_scores(&[1.0], &vocab_2d(), 0.0).is_err());
    }

    #[test]
    fn multi_hyp_sums_per_embedding_scores() {
        // f1 exactly on g1, f2 at squared distance 1 from it.
        let scores =
            multi_hyp_scores(&[vec![1.0, 0.0], vec![1.0, 1.0]], &vocab_2d(), 0.0).unwrap();
        assert_eq!(scores[1], -1.0);
        // g2: 2.0 from f1, 1.0 from f2.
        assert_eq!(scores[2], -3.0);
    }

    #[test]
    fn log_softmax_uniform_scores_give_uniform_probs() {
        for n in [1usize, 3, 7] {
            let out = log_softmax(&vec![0.7; n + 1]);
            for p in &out {
                assert!((p - (-((n + 1) as f64).ln())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_normalizes_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..8).map(|_| rng.random_range(-30.0..30.0)).collect();
            let lp = log_softmax(&scores);
            let total: f64 = lp.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
            // Shift invariance.
            let shifted: Vec<f64> = scores.iter().map(|s| s + 13.5).collect();
            for (a, b) in lp.iter().zip(log_softmax(&shifted)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn z_combine_basics() {
        assert_eq!(z_combine(-0.5, 0.0).unwrap(), -0.5);
        assert_eq!(z_combine(0.0, 0.3).unwrap(), -0.3);
        assert!(z_combine(0.0, -0.1).is_err());
        // Decreasing in d for s < 1, never above s.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let s = -rng.random_range(0.0..10.0);
            let d1 = rng.random_range(0.0..5.0);
            let d2 = d1 + rng.random_range(0.001..1.0);
            let z1 = z_combine(s, d1).unwrap();
            let z2 = z_combine(s, d2).unwrap();
            assert!(z2 < z1);
            assert!(z1 <= s);
        }
    }

    #[test]
    fn timestamped_single_matches_hand_computation() {
        let entry = SampleEntry {
            word: 0,
            vector: vec![0.5, 0.0],
            stamp: Timestamp::new(0.95, 0.22),
            is_reference: true,
        };
        let frame = FrameOutput {
            embeddings: vec![vec![0.0, 0.0]],
            blank: 0.0,
            blank_z: 1.0,
            stamps: vec![Timestamp::new(1.00, 0.20)],
        };
        let vocab = TimestampedVocab { entries: vec![entry] };
        let values = timestamped_scores_single(&frame, &vocab).unwrap();
        assert_eq!(values[0], -1.0);
        // s = -0.25, d = 0.05^2 + 0.02^2 = 0.0029, z = s - d + s*d.
        assert!((values[1] - (-0.253625)).abs() < 1e-12);
    }

    #[test]
    fn timestamped_multi_breaks_score_ties_toward_lowest_index() {
        // Both embeddings equidistant from the entry vector but with
        // different stamps; the first stamp must be used.
        let entry = SampleEntry {
            word: 0,
            vector: vec![0.0, 0.0],
            stamp: Timestamp::new(1.0, 0.5),
            is_reference: true,
        };
        let frame = FrameOutput {
            embeddings: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            blank: 0.0,
            blank_z: 0.0,
            stamps: vec![Timestamp::new(1.0, 0.5), Timestamp::new(9.0, 9.0)],
        };
        let vocab = TimestampedVocab { entries: vec![entry] };
        let (values, selected) = timestamped_scores(&frame, &vocab).unwrap();
        assert_eq!(selected, vec![0]);
        // d = 0 under the first stamp, so z = summed score = -2.
        assert_eq!(values[1], -2.0);
    }

    #[test]
    fn inner_product_scores_peak_at_c_for_matching_word() {
        let vocab = vocab_2d();
        let values = inner_product_scores(&[2.0, 0.0], &vocab, 10.0).unwrap();
        assert!((values[1] - 10.0).abs() < 1e-12);
        assert!(values[2].abs() < 1e-12);
        // Softmax over the word entries only: p1 = 1 / (1 + e^-10).
        let lp = log_softmax(&values[1..]);
        let p1 = lp[0].exp();
        assert!((p1 - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn word_posterior_argmax_sits_on_the_word_embedding() {
        // With a blank competing, ascending the log-posterior of word i
        // over the frame embedding lands on g_i when words are far apart.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &dim in &[32usize, 48] {
            let mut vocab = EmbeddingMatrix::new(dim).unwrap();
            for w in 0..16 {
                let v: Vec<f64> =
                    (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
                vocab.push(format!("w{w}"), v).unwrap();
            }
            let target = 3usize;
            let mut f: Vec<f64> =
                vocab.vector(target).iter().map(|x| x + 0.3 * rng.random_range(-1.0..1.0)).collect();
            for _ in 0..4000 {
                let lp = log_softmax(&l2_scores(&f, &vocab, 1.0).unwrap());
                let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
                // d log p_target / d f = -2(f - g_target) + 2 sum_j p_j (f - g_j).
                let mut grad = vec![0.0; dim];
                for (x, (fi, gi)) in grad.iter_mut().zip(f.iter().zip(vocab.vector(target))) {
                    *x = -2.0 * (fi - gi);
                }
                for j in 0..vocab.len() {
                    let pj = probs[j + 1];
                    for (x, (fi, gj)) in grad.iter_mut().zip(f.iter().zip(vocab.vector(j))) {
                        *x += 2.0 * pj * (fi - gj);
                    }
                }
                // The blank score has no f dependence, so it adds nothing.
                for (fi, g) in f.iter_mut().zip(&grad) {
                    *fi += 0.05 * g;
                }
            }
            for (fi, gi) in f.iter().zip(vocab.vector(target)) {
                assert!((fi - gi).abs() < 1e-2, "dim {dim}: coordinate gap {}", (fi - gi).abs());
            }
        }
    }

    #[test]
    fn embedding_matrix_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = EmbeddingMatrix::new(5).unwrap();
        for w in 0..9 {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            m.push(format!("word{w:02}"), v).unwrap();
        }
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = EmbeddingMatrix::read_text(buf.as_slice()).unwrap();
        assert_eq!(back.dim(), 5);
        assert_eq!(back.len(), 9);
        for i in 0..9 {
            assert_eq!(back.id(i), m.id(i));
            for (a, b) in back.vector(i).iter().zip(m.vector(i)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn embedding_matrix_rejects_duplicates_and_bad_rows() {
        let mut m = EmbeddingMatrix::new(2).unwrap();
        m.push("a", vec![0.0, 1.0]).unwrap();
        assert!(m.push("a", vec![1.0, 0.0]).is_err());
        assert!(m.push("b", vec![1.0]).is_err());

        let text = "2 1\nw0 0.5\n";
        let err = EmbeddingMatrix::read_text(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
