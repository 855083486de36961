//! CTC posteriors, gradients, and the combined training loss.
//!
//! The label alphabet is a score-vector index space: 0 is blank, words are
//! 1-based.  A label sequence is feasible when some frame labeling maps to
//! it after collapsing repeats and removing blanks; infeasible sequences
//! get log-posterior `-inf` rather than an error, so callers can treat
//! impossibility as a soft score.

use crate::scoring::{self, EmbeddingMatrix, FrameOutput, Timestamp, TimestampedVocab};
use crate::{Error, Result};

/// Per-frame log-probabilities over `n + 1` symbols (blank at 0), each row
/// normalized.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    log_probs: Vec<Vec<f64>>,
}

impl PosteriorGrid {
    /// Build from per-frame rows, checking widths agree and every row's
    /// probabilities sum to 1 within 1e-9.
    pub fn new(log_probs: Vec<Vec<f64>>) -> Result<Self> {
        if log_probs.is_empty() {
            return Err(Error::invalid("posterior grid needs at least one frame"));
        }
        let width = log_probs[0].len();
        if width < 2 {
            return Err(Error::invalid("posterior grid needs blank plus at least one word"));
        }
        for (t, row) in log_probs.iter().enumerate() {
            if row.len() != width {
                return Err(Error::DimMismatch { expected: width, got: row.len() });
            }
            let mass: f64 = row.iter().map(|lp| lp.exp()).sum();
            if (mass - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "frame {t} probabilities sum to {mass}, expected 1"
                )));
            }
        }
        Ok(PosteriorGrid { log_probs })
    }

    /// Frame count.
    pub fn frames(&self) -> usize {
        self.log_probs.len()
    }

    /// Symbol count including blank.
    pub fn width(&self) -> usize {
        self.log_probs[0].len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.log_probs[t]
    }
}

/// Interleave blanks around the labels: `[w1, w2]` becomes
/// `[0, w1, 0, w2, 0]`.
pub fn expand_with_blanks(labels: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * labels.len() + 1);
    out.push(0);
    for &l in labels {
        out.push(l);
        out.push(0);
    }
    out
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_labels(grid: &PosteriorGrid, labels: &[usize]) -> Result<()> {
    for &l in labels {
        if l == 0 || l >= grid.width() {
            return Err(Error::invalid(format!(
                "label {l} outside word index range 1..{}",
                grid.width()
            )));
        }
    }
    Ok(())
}

/// Forward algorithm over the blank-expanded label sequence.
fn forward(grid: &PosteriorGrid, ext: &[usize]) -> Vec<Vec<f64>> {
    let t_max = grid.frames();
    let s_max = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_max]; t_max];
    alpha[0][0] = grid.row(0)[ext[0]];
    if s_max > 1 {
        alpha[0][1] = grid.row(0)[ext[1]];
    }
    for t in 1..t_max {
        let row = grid.row(t);
        for s in 0..s_max {
            let mut mass = alpha[t - 1][s];
            if s >= 1 {
                mass = log_sum_exp2(mass, alpha[t - 1][s - 1]);
            }
            // A skip over the intervening blank is allowed unless the
            // neighboring labels are identical.
            if s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2] {
                mass = log_sum_exp2(mass, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if mass == f64::NEG_INFINITY { mass } else { mass + row[ext[s]] };
        }
    }
    alpha
}

/// Log-posterior of the label sequence: the summed probability of every
/// frame labeling that collapses to it.  Returns `-inf` when infeasible
/// (for example more labels than frames).
pub fn log_posterior(grid: &PosteriorGrid, labels: &[usize]) -> Result<f64> {
    check_labels(grid, labels)?;
    let ext = expand_with_blanks(labels);
    let alpha = forward(grid, &ext);
    let last = &alpha[grid.frames() - 1];
    let mut total = last[ext.len() - 1];
    if ext.len() >= 2 {
        total = log_sum_exp2(total, last[ext.len() - 2]);
    }
    Ok(total)
}

/// Independent oracle: enumerate every frame labeling, collapse repeats,
/// drop blanks, and sum the probabilities of labelings matching `labels`.
/// Exponential in the frame count; rejected above 10^7 paths.
pub fn brute_force_log_posterior(grid: &PosteriorGrid, labels: &[usize]) -> Result<f64> {
    check_labels(grid, labels)?;
    let symbols = grid.width();
    let frames = grid.frames();
    let paths = (symbols as f64).powi(frames as i32);
    if paths > 1e7 {
        return Err(Error::invalid(format!(
            "{symbols}^{frames} paths exceed the enumeration budget"
        )));
    }
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed: Vec<usize> = Vec::new();
        let mut prev = usize::MAX;
        for &sym in &path {
            if sym != prev && sym != 0 {
                collapsed.push(sym);
            }
            prev = sym;
        }
        if collapsed == labels {
            let lp: f64 = path.iter().enumerate().map(|(t, &sym)| grid.row(t)[sym]).sum();
            total = log_sum_exp2(total, lp);
        }
        // Advance the odometer.
        let mut pos = 0;
        loop {
            if pos == frames {
                return Ok(total);
            }
            path[pos] += 1;
            if path[pos] < symbols {
                break;
            }
            path[pos] = 0;
            pos += 1;
        }
    }
}

/// Gradient of `-log_posterior` with respect to each per-frame
/// log-probability, via forward-backward.  For an infeasible sequence the
/// posterior is identically zero and the gradient is returned as zeros.
pub fn gradient(grid: &PosteriorGrid, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    check_labels(grid, labels)?;
    let ext = expand_with_blanks(labels);
    let t_max = grid.frames();
    let s_max = ext.len();
    let alpha = forward(grid, &ext);

    // beta[t][s] excludes the emission at t, so alpha + beta sums full paths.
    let mut beta = vec![vec![f64::NEG_INFINITY; s_max]; t_max];
    beta[t_max - 1][s_max - 1] = 0.0;
    if s_max >= 2 {
        beta[t_max - 1][s_max - 2] = 0.0;
    }
    for t in (0..t_max - 1).rev() {
        let next = grid.row(t + 1);
        for s in 0..s_max {
            let mut mass = next[ext[s]] + beta[t + 1][s];
            if s + 1 < s_max {
                mass = log_sum_exp2(mass, next[ext[s + 1]] + beta[t + 1][s + 1]);
            }
            if s + 2 < s_max && ext[s + 2] != 0 && ext[s + 2] != ext[s] {
                mass = log_sum_exp2(mass, next[ext[s + 2]] + beta[t + 1][s + 2]);
            }
            beta[t][s] = mass;
        }
    }

    let mut total = alpha[t_max - 1][s_max - 1];
    if s_max >= 2 {
        total = log_sum_exp2(total, alpha[t_max - 1][s_max - 2]);
    }
    let mut grad = vec![vec![0.0; grid.width()]; t_max];
    if total == f64::NEG_INFINITY {
        return Ok(grad);
    }
    for t in 0..t_max {
        // Occupancy per symbol: sum alpha*beta over states carrying it.
        let mut occ = vec![f64::NEG_INFINITY; grid.width()];
        for s in 0..s_max {
            let mass = alpha[t][s] + beta[t][s];
            occ[ext[s]] = log_sum_exp2(occ[ext[s]], mass);
        }
        for (g, o) in grad[t].iter_mut().zip(&occ) {
            if *o != f64::NEG_INFINITY {
                *g = -((o - total).exp());
            }
        }
    }
    Ok(grad)
}

/// Chain a `-log posterior` gradient w.r.t. log-probs back through the
/// log-softmax that produced the row: `d/ds_j = g_j - p_j * sum_i g_i`.
pub fn grad_through_log_softmax(log_probs: &[f64], grad_log_p: &[f64]) -> Vec<f64> {
    let total: f64 = grad_log_p.iter().sum();
    log_probs
        .iter()
        .zip(grad_log_p)
        .map(|(lp, g)| g - lp.exp() * total)
        .collect()
}

/// Loss of one utterance: the word-stream CTC term, the timestamped-stream
/// CTC term, and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub word_loss: f64,
    pub stamp_loss: f64,
    pub total: f64,
}

/// Build the word-stream posterior grid from frame outputs.
pub fn word_grid(frames: &[FrameOutput], vocab: &EmbeddingMatrix) -> Result<PosteriorGrid> {
    let rows = frames
        .iter()
        .map(|f| {
            scoring::multi_hyp_scores(&f.embeddings, vocab, f.blank)
                .map(|s| scoring::log_softmax(&s))
        })
        .collect::<Result<Vec<_>>>()?;
    PosteriorGrid::new(rows)
}

/// Build the timestamped-stream posterior grid over a sampled vocabulary.
pub fn stamp_grid(frames: &[FrameOutput], tvocab: &TimestampedVocab) -> Result<PosteriorGrid> {
    let rows = frames
        .iter()
        .map(|f| scoring::timestamped_scores(f, tvocab).map(|(s, _)| scoring::log_softmax(&s)))
        .collect::<Result<Vec<_>>>()?;
    PosteriorGrid::new(rows)
}

/// Map each reference (word, stamp) pair to its 1-based entry index in the
/// sampled vocabulary.  The sampler stores references verbatim, so exact
/// comparison is the correct lookup.
pub fn reference_labels(
    tvocab: &TimestampedVocab,
    words: &[usize],
    stamps: &[Timestamp],
) -> Result<Vec<usize>> {
    if words.len() != stamps.len() {
        return Err(Error::invalid("one timestamp required per reference word"));
    }
    words
        .iter()
        .zip(stamps)
        .map(|(&w, &st)| {
            tvocab
                .entries
                .iter()
                .position(|e| e.is_reference && e.word == w && e.stamp == st)
                .map(|i| i + 1)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "reference word {w} at {:.3}s missing from sampled vocabulary",
                        st.start
                    ))
                })
        })
        .collect()
}

/// Combined training loss over both streams.  `words` are 1-based indices
/// into `vocab`'s score layout (i.e. matrix index + 1).
pub fn combined_loss(
    frames: &[FrameOutput],
    vocab: &EmbeddingMatrix,
    tvocab: &TimestampedVocab,
    words: &[usize],
    stamps: &[Timestamp],
) -> Result<LossBreakdown> {
    let word_loss = -log_posterior(&word_grid(frames, vocab)?, words)?;
    let zero_based: Vec<usize> = words.iter().map(|w| w - 1).collect();
    let labels = reference_labels(tvocab, &zero_based, stamps)?;
    let stamp_loss = -log_posterior(&stamp_grid(frames, tvocab)?, &labels)?;
    Ok(LossBreakdown { word_loss, stamp_loss, total: word_loss + stamp_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from_probs(rows: Vec<Vec<f64>>) -> PosteriorGrid {
        PosteriorGrid::new(
            rows.into_iter().map(|r| r.into_iter().map(|p: f64| p.ln()).collect()).collect(),
        )
        .unwrap()
    }

    fn random_grid(rng: &mut ChaCha8Rng, frames: usize, words: usize) -> PosteriorGrid {
        let rows = (0..frames)
            .map(|_| {
                let scores: Vec<f64> = (0..=words).map(|_| rng.random_range(-2.0..2.0)).collect();
                crate::scoring::log_softmax(&scores)
            })
            .collect();
        PosteriorGrid::new(rows).unwrap()
    }

    #[test]
    fn single_frame_single_word() {
        let grid = grid_from_probs(vec![vec![0.6, 0.4]]);
        assert!((log_posterior(&grid, &[1]).unwrap() - 0.4f64.ln()).abs() < 1e-12);
        assert!((log_posterior(&grid, &[]).unwrap() - 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_word_sums_three_paths() {
        let grid = grid_from_probs(vec![vec![0.6, 0.4], vec![0.6, 0.4]]);
        // Paths: bw, wb, ww.
        let expect = (0.6 * 0.4 + 0.4 * 0.6 + 0.4 * 0.4f64).ln();
        assert!((log_posterior(&grid, &[1]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn infeasible_sequences_score_neg_infinity() {
        let grid = grid_from_probs(vec![vec![0.5, 0.3, 0.2]]);
        assert_eq!(log_posterior(&grid, &[1, 2]).unwrap(), f64::NEG_INFINITY);
        // Adjacent repeats need an intervening blank frame.
        let grid2 = grid_from_probs(vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_eq!(log_posterior(&grid2, &[1, 1]).unwrap(), f64::NEG_INFINITY);
        let grid3 = grid_from_probs(vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(log_posterior(&grid3, &[1, 1]).unwrap() > f64::NEG_INFINITY);
    }

    #[test]
    fn labels_outside_grid_width_are_rejected() {
        let grid = grid_from_probs(vec![vec![0.5, 0.5]]);
        assert!(log_posterior(&grid, &[2]).is_err());
        assert!(log_posterior(&grid, &[0]).is_err());
    }

    #[test]
    fn forward_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..200 {
            let frames = rng.random_range(1..=6);
            let words = rng.random_range(1..=4);
            let grid = random_grid(&mut rng, frames, words);
            let len = rng.random_range(0..=frames.min(3));
            let labels: Vec<usize> = (0..len).map(|_| rng.random_range(1..=words)).collect();
            let fast = log_posterior(&grid, &labels).unwrap();
            let slow = brute_force_log_posterior(&grid, &labels).unwrap();
            if fast == f64::NEG_INFINITY || slow == f64::NEG_INFINITY {
                assert_eq!(fast, slow, "case {case}: feasibility disagreement");
            } else {
                assert!((fast - slow).abs() < 1e-10, "case {case}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = random_grid(&mut rng, 30, 4);
        assert!(brute_force_log_posterior(&grid, &[1]).is_err());
    }

    #[test]
    fn appending_a_pure_blank_frame_keeps_the_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let frames = rng.random_range(2..=5);
            let words = rng.random_range(1..=3);
            let grid = random_grid(&mut rng, frames, words);
            let labels: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=words)).collect();
            let base = log_posterior(&grid, &labels).unwrap();
            let mut rows: Vec<Vec<f64>> =
                (0..grid.frames()).map(|t| grid.row(t).to_vec()).collect();
            let mut blank_row = vec![f64::NEG_INFINITY; words + 1];
            blank_row[0] = 0.0;
            rows.push(blank_row);
            let extended = PosteriorGrid::new(rows).unwrap();
            let ext = log_posterior(&extended, &labels).unwrap();
            if base == f64::NEG_INFINITY {
                assert_eq!(ext, f64::NEG_INFINITY);
            } else {
                assert!((base - ext).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_single_frame_is_minus_one_on_the_label() {
        let grid = grid_from_probs(vec![vec![0.6, 0.4]]);
        let g = gradient(&grid, &[1]).unwrap();
        assert!((g[0][1] + 1.0).abs() < 1e-12);
        assert_eq!(g[0][0], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h = 1e-5;
        for _ in 0..10 {
            let frames = rng.random_range(2..=5);
            let words = rng.random_range(1..=3);
            let grid = random_grid(&mut rng, frames, words);
            let labels: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(1..=words)).collect();
            if log_posterior(&grid, &labels).unwrap() == f64::NEG_INFINITY {
                continue;
            }
            let analytic = gradient(&grid, &labels).unwrap();
            let mut rows: Vec<Vec<f64>> =
                (0..grid.frames()).map(|t| grid.row(t).to_vec()).collect();
            for t in 0..frames {
                for i in 0..=words {
                    // The forward pass is well defined for unnormalized rows,
                    // so each log-probability can be perturbed independently.
                    let keep = rows[t][i];
                    rows[t][i] = keep + h;
                    let up = -raw_log_posterior(&rows, &labels);
                    rows[t][i] = keep - h;
                    let down = -raw_log_posterior(&rows, &labels);
                    rows[t][i] = keep;
                    let fd = (up - down) / (2.0 * h);
                    let a = analytic[t][i];
                    let denom = a.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((a - fd) / denom).abs() < 1e-4,
                        "t={t} i={i}: analytic {a} vs fd {fd}"
                    );
                }
            }
        }
    }

    // Forward pass on raw (possibly unnormalized) log-prob rows, used only
    // to finite-difference the gradient.
    fn raw_log_posterior(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let ext = expand_with_blanks(labels);
        let mut alpha = vec![f64::NEG_INFINITY; ext.len()];
        alpha[0] = rows[0][ext[0]];
        if ext.len() > 1 {
            alpha[1] = rows[0][ext[1]];
        }
        for row in &rows[1..] {
            let prev = alpha.clone();
            for s in 0..ext.len() {
                let mut mass = prev[s];
                if s >= 1 {
                    mass = log_sum_exp2(mass, prev[s - 1]);
                }
                if s >= 2 && ext[s] != 0 && ext[s] != ext[s - 2] {
                    mass = log_sum_exp2(mass, prev[s - 2]);
                }
                alpha[s] =
                    if mass == f64::NEG_INFINITY { mass } else { mass + row[ext[s]] };
            }
        }
        let mut total = alpha[ext.len() - 1];
        if ext.len() >= 2 {
            total = log_sum_exp2(total, alpha[ext.len() - 2]);
        }
        total
    }

    #[test]
    fn presoftmax_gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let grid = random_grid(&mut rng, 5, 3);
        let labels = vec![2, 1];
        let g = gradient(&grid, &labels).unwrap();
        for t in 0..grid.frames() {
            let ds = grad_through_log_softmax(grid.row(t), &g[t]);
            let sum: f64 = ds.iter().sum();
            assert!(sum.abs() < 1e-12, "frame {t} sums to {sum}");
        }
    }

    #[test]
    fn log_sum_exp_handles_neg_infinity() {
        assert_eq!(log_sum_exp2(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp2(f64::NEG_INFINITY, -1.5), -1.5);
        assert!((log_sum_exp2(0.0, 0.0) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn posterior_grid_rejects_unnormalized_rows() {
        assert!(PosteriorGrid::new(vec![vec![-0.1, -0.1]]).is_err());
    }
}
