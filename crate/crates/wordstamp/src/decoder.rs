//! Prefix beam search over per-frame word posteriors.
//!
//! Each frame the search keeps a beam of word-sequence prefixes, each with
//! separate path mass for "last frame was blank" and "last frame was the
//! final word".  Extensions draw from the top-scoring words of the frame,
//! fuse language-model and entity bonuses into the search score, and pass
//! through a timestamp gate: a word whose predicted start lies implausibly
//! far before the previous word's predicted end is rejected.  Surviving
//! prefixes form a tree that doubles as the output lattice.

use std::collections::HashMap;

use crate::lattice::{Lattice, LatticeArc, LatticeNode};
use crate::lm::Lm;
use crate::scoring::{log_softmax, multi_hyp_scores, EmbeddingMatrix, FrameOutput, Timestamp};
use crate::{Error, Result};

/// Beam-search settings.
#[derive(Debug, Clone)]
pub struct DecoderConfig {
    /// Words considered for extension per frame.
    pub input_beam: usize,
    /// Embedding hypotheses tracked per word; only `1` is supported.
    pub label_beam: usize,
    /// Prefixes kept per frame.
    pub word_beam: usize,
    /// Weight on language-model log-probabilities in the fused score.
    pub lm_weight: f64,
    /// Bonus added when the extending word is an entity.
    pub class_weight: f64,
    /// The blank score's magnitude is divided by this before
    /// re-normalization: above one the blank penalty shrinks (blank wins
    /// more often, fewer insertions), below one it grows (fewer
    /// deletions).
    pub blank_divisor: f64,
    /// Gate slack in seconds: a new word is rejected when the previous
    /// word's predicted end exceeds the new word's predicted start by more
    /// than this.  Infinite disables the gate.
    pub overlap_gamma: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            input_beam: 40,
            label_beam: 1,
            word_beam: 100,
            lm_weight: 0.0,
            class_weight: 0.0,
            blank_divisor: 1.0,
            overlap_gamma: 0.2,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.label_beam != 1 {
            return Err(Error::invalid(format!(
                "label_beam {} is not supported; only 1 embedding hypothesis \
                 per word can be tracked",
                self.label_beam
            )));
        }
        if self.input_beam == 0 || self.word_beam == 0 {
            return Err(Error::invalid("beam widths must be at least 1"));
        }
        if !(self.blank_divisor > 0.0) {
            return Err(Error::invalid("blank_divisor must be positive"));
        }
        if self.overlap_gamma < 0.0 {
            return Err(Error::invalid("overlap_gamma must be non-negative"));
        }
        Ok(())
    }
}

/// One decoded word with its predicted timestamp and per-word scores.
#[derive(Debug, Clone, PartialEq)]
pub struct WordHyp {
    /// Vocabulary index (0-based).
    pub word: usize,
    pub stamp: Timestamp,
    /// Log posterior of the word at its emission frame.
    pub acoustic: f64,
    /// Raw LM log-probability at emission.
    pub lm: f64,
    /// Frame that emitted the word (first frame of its run).
    pub frame: usize,
}

/// A complete decoding hypothesis.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub words: Vec<WordHyp>,
    /// Total fused path score (log domain).
    pub score: f64,
}

impl Hypothesis {
    pub fn word_indices(&self) -> Vec<usize> {
        self.words.iter().map(|w| w.word).collect()
    }

    pub fn word_strings(&self, vocab: &EmbeddingMatrix) -> Vec<String> {
        self.words.iter().map(|w| vocab.id(w.word).to_string()).collect()
    }

    /// Frame of the last word emission, if any.
    pub fn last_frame(&self) -> Option<usize> {
        self.words.last().map(|w| w.frame)
    }
}

/// Does a word starting at `next_start` follow acceptably after a word
/// ending at `prev_end`, given gate slack `gamma` (seconds)?
pub fn overlap_ok(prev_end: f64, next_start: f64, gamma: f64) -> bool {
    !(prev_end > next_start + gamma)
}

// Shared per-frame view: normalized log posteriors (blank at index 0), the
// timestamp each word would receive if emitted this frame, and the top
// input-beam word candidates.
struct FrameView {
    logp: Vec<f64>,
    stamps: Vec<Timestamp>,
    candidates: Vec<usize>,
}

fn frame_view(
    frame: &FrameOutput,
    vocab: &EmbeddingMatrix,
    cfg: &DecoderConfig,
) -> Result<FrameView> {
    let mut scores = multi_hyp_scores(&frame.embeddings, vocab, frame.blank)?;
    scores[0] /= cfg.blank_divisor;
    let logp = log_softmax(&scores);

    // Best embedding hypothesis per word picks the timestamp (ties go to
    // the earliest hypothesis).
    let mut stamps = Vec::with_capacity(vocab.len());
    for i in 0..vocab.len() {
        let g = vocab.vector(i);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (k, f) in frame.embeddings.iter().enumerate() {
            let s: f64 = -f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        stamps.push(frame.stamps[best]);
    }

    // Top `input_beam` words by posterior, ties to the lower index.
    let mut idx: Vec<usize> = (0..vocab.len()).collect();
    idx.sort_by(|&a, &b| logp[b + 1].partial_cmp(&logp[a + 1]).unwrap().then(a.cmp(&b)));
    idx.truncate(cfg.input_beam);
    Ok(FrameView { logp, stamps, candidates: idx })
}

#[derive(Clone)]
struct Cell {
    words: Vec<WordHyp>,
    lp_b: f64,
    lp_nb: f64,
    /// Sum of fused emission increments along the path (for lattice final
    /// weights).
    arc_sum: f64,
    node: Option<usize>,
}

impl Cell {
    fn root() -> Self {
        Cell {
            words: Vec::new(),
            lp_b: 0.0,
            lp_nb: f64::NEG_INFINITY,
            arc_sum: 0.0,
            node: Some(0),
        }
    }

    fn total(&self) -> f64 {
        log_add(self.lp_b, self.lp_nb)
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

// A cell being accumulated for the next frame.  The single largest
// contribution donates the word list (and with it the timestamps), so a
// run keeps the stamp of its first frame.
struct CellAcc {
    cell: Cell,
    best_contrib: f64,
}

impl CellAcc {
    fn add(&mut self, donor: &Cell, new_word: Option<WordHyp>, contrib: f64, to_blank: bool) {
        if contrib > self.best_contrib {
            self.best_contrib = contrib;
            self.cell.words = donor.words.clone();
            self.cell.arc_sum = donor.arc_sum;
            self.cell.node = donor.node;
            if let Some(hyp) = new_word {
                self.cell.node = None;
                self.cell.words.push(hyp);
            }
        }
        if to_blank {
            self.cell.lp_b = log_add(self.cell.lp_b, contrib);
        } else {
            self.cell.lp_nb = log_add(self.cell.lp_nb, contrib);
        }
    }
}

impl Default for CellAcc {
    fn default() -> Self {
        CellAcc {
            cell: Cell {
                words: Vec::new(),
                lp_b: f64::NEG_INFINITY,
                lp_nb: f64::NEG_INFINITY,
                arc_sum: 0.0,
                node: None,
            },
            best_contrib: f64::NEG_INFINITY,
        }
    }
}

// Key for merging prefixes within a frame.
type Prefix = Vec<usize>;

// One frame of the prefix-beam recursion shared by decoding and forced
// alignment.  `candidates` yields the allowed extensions for a prefix.
fn advance_frame(
    beam: &[(Prefix, Cell)],
    view: &FrameView,
    lm: &dyn Lm,
    cfg: &DecoderConfig,
    candidates: impl Fn(&Prefix) -> Vec<usize>,
) -> HashMap<Prefix, CellAcc> {
    let mut next: HashMap<Prefix, CellAcc> = HashMap::new();
    for (prefix, cell) in beam {
        // Stay on blank: the prefix is unchanged.
        next.entry(prefix.clone()).or_default().add(
            cell,
            None,
            cell.total() + view.logp[0],
            true,
        );
        // Re-emit the final word without a blank in between: the frames
        // collapse into one run, so the prefix is again unchanged.
        if let Some(last) = prefix.last() {
            if cell.lp_nb > f64::NEG_INFINITY {
                next.entry(prefix.clone()).or_default().add(
                    cell,
                    None,
                    cell.lp_nb + view.logp[last + 1],
                    false,
                );
            }
        }
        // Extend with a new word.
        for w in candidates(prefix) {
            let stamp = view.stamps[w];
            if let Some(prev) = cell.words.last() {
                if !overlap_ok(prev.stamp.end(), stamp.start, cfg.overlap_gamma) {
                    continue;
                }
            }
            // Emitting the word the prefix already ends with requires an
            // intervening blank; otherwise the frames fuse into one run.
            let base = if Some(&w) == prefix.last() { cell.lp_b } else { cell.total() };
            if base == f64::NEG_INFINITY {
                continue;
            }
            let lm_lp = lm.log_prob(prefix, w);
            let mut inc = view.logp[w + 1] + cfg.lm_weight * lm_lp;
            if lm.is_entity(w) {
                inc += cfg.class_weight;
            }
            let mut prefix2 = prefix.clone();
            prefix2.push(w);
            let hyp = WordHyp {
                word: w,
                stamp,
                acoustic: view.logp[w + 1],
                lm: lm_lp,
                frame: usize::MAX, // patched by the caller, which knows t
            };
            let mut donor = cell.clone();
            donor.arc_sum += inc;
            next.entry(prefix2).or_default().add(&donor, Some(hyp), base + inc, false);
        }
    }
    next
}

/// Run the prefix beam search over an utterance.
///
/// Returns the surviving hypotheses, best first, together with the search
/// lattice.  Word indices in the result are 0-based vocabulary rows.
pub fn decode(
    frames: &[FrameOutput],
    vocab: &EmbeddingMatrix,
    lm: &dyn Lm,
    cfg: &DecoderConfig,
) -> Result<(Vec<Hypothesis>, Lattice)> {
    cfg.validate()?;
    let mut lattice = Lattice::empty();
    // Log path mass from the root to each node; keeps arc weights exact
    // without walking the tree.
    let mut node_mass: Vec<f64> = vec![0.0];
    let mut beam: Vec<(Prefix, Cell)> = vec![(Vec::new(), Cell::root())];

    for (t, frame) in frames.iter().enumerate() {
        let view = frame_view(frame, vocab, cfg)?;
        let next = advance_frame(&beam, &view, lm, cfg, |_| view.candidates.clone());

        // Prune to the word beam; ties prefer the lexicographically
        // smaller prefix so results are reproducible.
        let mut merged: Vec<(Prefix, Cell)> = next
            .into_iter()
            .map(|(p, mut acc)| {
                if let Some(last) = acc.cell.words.last_mut() {
                    if last.frame == usize::MAX {
                        last.frame = t;
                    }
                }
                (p, acc.cell)
            })
            .collect();
        merged.sort_by(|a, b| {
            b.1.total().partial_cmp(&a.1.total()).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        merged.truncate(cfg.word_beam);

        // Register newly surviving prefixes as lattice nodes.  A new
        // prefix extends a cell of the previous beam, whose node exists.
        let prev_nodes: HashMap<&Prefix, usize> =
            beam.iter().filter_map(|(p, c)| c.node.map(|n| (p, n))).collect();
        for (prefix, cell) in &mut merged {
            if cell.node.is_some() {
                continue;
            }
            let parent = prefix[..prefix.len() - 1].to_vec();
            let Some(&from) = prev_nodes.get(&parent) else {
                continue; // parent left the tree; keep the cell, skip the arc
            };
            let node_id = lattice.nodes.len();
            let last = cell.words.last().expect("non-root prefix has words");
            lattice.nodes.push(LatticeNode { frame: t, final_weight: None });
            lattice.arcs.push(LatticeArc {
                from,
                to: node_id,
                word: vocab.id(last.word).to_string(),
                start_ms: (last.stamp.start * 1000.0).round() as i64,
                end_ms: (last.stamp.end() * 1000.0).round() as i64,
                acoustic: last.acoustic,
                lm: last.lm,
                weight: cell.arc_sum - node_mass[from],
            });
            node_mass.push(cell.arc_sum);
            cell.node = Some(node_id);
        }
        beam = merged;
    }

    beam.sort_by(|a, b| {
        b.1.total().partial_cmp(&a.1.total()).unwrap().then_with(|| a.0.cmp(&b.0))
    });
    for (_, cell) in &beam {
        if let Some(node) = cell.node {
            lattice.nodes[node].final_weight = Some(cell.total() - cell.arc_sum);
        }
    }
    let out = beam
        .into_iter()
        .map(|(_, cell)| {
            let score = cell.total();
            Hypothesis { words: cell.words, score }
        })
        .collect();
    Ok((out, lattice))
}

/// Result of forced alignment.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub words: Vec<WordHyp>,
    /// Fused path score of the alignment.
    pub score: f64,
    /// False when no feasible path was found even after widening.
    pub feasible: bool,
    /// True when the beams had to be widened to find a path.
    pub widened: bool,
}

/// Align an utterance against its reference word sequence.
///
/// The search is the decoder restricted to one extension per prefix (the
/// next reference word); if pruning starves the final state, the beams are
/// widened once before giving up.
pub fn forced_align(
    frames: &[FrameOutput],
    vocab: &EmbeddingMatrix,
    refs: &[usize],
    lm: &dyn Lm,
    cfg: &DecoderConfig,
) -> Result<Alignment> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::invalid("reference word sequence is empty"));
    }
    for &w in refs {
        if w >= vocab.len() {
            return Err(Error::invalid(format!(
                "reference word index {w} outside vocabulary of {}",
                vocab.len()
            )));
        }
    }
    if let Some(a) = forced_align_pass(frames, vocab, refs, lm, cfg)? {
        return Ok(Alignment { feasible: true, widened: false, ..a });
    }
    let mut wide = cfg.clone();
    wide.word_beam = wide.word_beam.max(refs.len() + 1).saturating_mul(8);
    wide.input_beam = wide.input_beam.saturating_mul(8);
    if let Some(a) = forced_align_pass(frames, vocab, refs, lm, &wide)? {
        return Ok(Alignment { feasible: true, widened: true, ..a });
    }
    Ok(Alignment { words: Vec::new(), score: f64::NEG_INFINITY, feasible: false, widened: true })
}

fn forced_align_pass(
    frames: &[FrameOutput],
    vocab: &EmbeddingMatrix,
    refs: &[usize],
    lm: &dyn Lm,
    cfg: &DecoderConfig,
) -> Result<Option<Alignment>> {
    // Reachable prefixes are exactly the prefixes of `refs`, so the beam
    // holds at most refs.len() + 1 cells.
    let mut beam: Vec<(Prefix, Cell)> = vec![(Vec::new(), Cell::root())];
    for (t, frame) in frames.iter().enumerate() {
        let view = frame_view(frame, vocab, cfg)?;
        let next = advance_frame(&beam, &view, lm, cfg, |prefix| {
            refs.get(prefix.len()).map(|&w| vec![w]).unwrap_or_default()
        });
        let mut merged: Vec<(Prefix, Cell)> = next
            .into_iter()
            .map(|(p, mut acc)| {
                if let Some(last) = acc.cell.words.last_mut() {
                    if last.frame == usize::MAX {
                        last.frame = t;
                    }
                }
                (p, acc.cell)
            })
            .collect();
        merged.sort_by(|a, b| {
            b.1.total().partial_cmp(&a.1.total()).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        merged.truncate(cfg.word_beam);
        beam = merged;
    }
    Ok(beam.into_iter().find(|(p, _)| p.len() == refs.len()).and_then(|(_, cell)| {
        let score = cell.total();
        if score == f64::NEG_INFINITY {
            None
        } else {
            Some(Alignment { words: cell.words, score, feasible: true, widened: false })
        }
    }))
}

/// Read timestamps off a per-frame label path.
///
/// `labels` uses the score indexing: 0 is blank, `i` is vocabulary word
/// `i - 1`.  Each maximal run of a non-blank label yields one word whose
/// timestamp comes from the run's first frame (via the embedding
/// hypothesis closest to the word).
pub fn extract_timestamps(
    labels: &[usize],
    frames: &[FrameOutput],
    vocab: &EmbeddingMatrix,
) -> Result<Vec<(usize, Timestamp)>> {
    if labels.len() != frames.len() {
        return Err(Error::invalid(format!(
            "label path length {} does not match frame count {}",
            labels.len(),
            frames.len()
        )));
    }
    let mut out = Vec::new();
    let mut prev = 0usize;
    for (t, &lab) in labels.iter().enumerate() {
        if lab != 0 && lab != prev {
            let word = lab - 1;
            if word >= vocab.len() {
                return Err(Error::invalid(format!(
                    "label {lab} outside vocabulary of {}",
                    vocab.len()
                )));
            }
            let g = vocab.vector(word);
            let frame = &frames[t];
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for (k, f) in frame.embeddings.iter().enumerate() {
                let s: f64 = -f.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                if s > best_score {
                    best_score = s;
                    best = k;
                }
            }
            out.push((word, frame.stamps[best]));
        }
        prev = lab;
    }
    Ok(out)
}
