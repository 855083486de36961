//! Transcript and timestamp quality measures.
//!
//! Word error rate comes from a standard edit-distance alignment.  The
//! entity error rate restricts the same alignment to reference tokens
//! flagged as entities, so a recognizer can be judged on names
//! specifically.  Timestamp quality is the mean absolute start and
//! duration difference between aligned hypothesis and reference words.

use crate::{Error, Result};

/// Word error rate over one or more utterances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerResult {
    pub errors: usize,
    pub ref_len: usize,
    pub rate: f64,
    /// Set when the reference was empty but the hypothesis was not; the
    /// rate then counts hypothesis words against a denominator of one.
    pub degenerate: bool,
}

/// One step of an edit-distance alignment path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    /// Consumes ref[i] and hyp[j], equal tokens.
    Match,
    /// Consumes ref[i] and hyp[j], different tokens.
    Substitute,
    /// Consumes ref[i] only.
    Delete,
    /// Consumes hyp[j] only.
    Insert,
}

/// Levenshtein alignment with a deterministic backtrace (diagonal
/// preferred, then deletion, then insertion).
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<AlignOp> {
    let n = reference.len();
    let m = hypothesis.len();
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        cost[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = cost[i - 1][j] + 1;
            let ins = cost[i][j - 1] + 1;
            cost[i][j] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diag = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            if cost[i][j] == diag {
                ops.push(if reference[i - 1] == hypothesis[j - 1] {
                    AlignOp::Match
                } else {
                    AlignOp::Substitute
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            ops.push(AlignOp::Delete);
            i -= 1;
        } else {
            ops.push(AlignOp::Insert);
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Word error rate: substitutions + deletions + insertions over the
/// reference length.  An empty reference with a nonempty hypothesis is
/// reported with a denominator of one and flagged rather than rejected.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> WerResult {
    if reference.is_empty() {
        let errors = hypothesis.len();
        return WerResult {
            errors,
            ref_len: 0,
            rate: errors as f64,
            degenerate: !hypothesis.is_empty(),
        };
    }
    let errors = align(reference, hypothesis)
        .iter()
        .filter(|op| !matches!(op, AlignOp::Match))
        .count();
    WerResult {
        errors,
        ref_len: reference.len(),
        rate: errors as f64 / reference.len() as f64,
        degenerate: false,
    }
}

/// Entity error rate: alignment errors attributed to entity reference
/// tokens, over the number of entity reference tokens.  Substitutions and
/// deletions count when the consumed reference token is an entity; an
/// insertion counts when it falls strictly inside an entity region (entity
/// reference tokens on both sides).  Returns `None` when the reference
/// carries no entities.
pub fn neer<T: PartialEq>(
    reference: &[T],
    hypothesis: &[T],
    entity_mask: &[bool],
) -> Result<Option<f64>> {
    if entity_mask.len() != reference.len() {
        return Err(Error::invalid("entity mask length must match the reference"));
    }
    let total = entity_mask.iter().filter(|&&e| e).count();
    if total == 0 {
        return Ok(None);
    }
    let mut errors = 0usize;
    let mut i = 0usize; // reference cursor
    for op in align(reference, hypothesis) {
        match op {
            AlignOp::Match => i += 1,
            AlignOp::Substitute | AlignOp::Delete => {
                if entity_mask[i] {
                    errors += 1;
                }
                i += 1;
            }
            AlignOp::Insert => {
                let before = i > 0 && entity_mask[i - 1];
                let after = i < entity_mask.len() && entity_mask[i];
                if before && after {
                    errors += 1;
                }
            }
        }
    }
    Ok(Some(errors as f64 / total as f64))
}

/// Mean absolute start and duration gaps, in milliseconds, over positionally
/// paired (start, duration) lists given in seconds.
pub fn segmentation_mae(
    hypothesis: &[(f64, f64)],
    reference: &[(f64, f64)],
) -> Result<(f64, f64)> {
    if hypothesis.len() != reference.len() {
        return Err(Error::invalid(format!(
            "cannot pair {} hypothesis words with {} reference words",
            hypothesis.len(),
            reference.len()
        )));
    }
    if hypothesis.is_empty() {
        return Err(Error::invalid("need at least one word pair"));
    }
    let n = hypothesis.len() as f64;
    let start: f64 =
        hypothesis.iter().zip(reference).map(|(h, r)| (h.0 - r.0).abs()).sum::<f64>() / n;
    let duration: f64 =
        hypothesis.iter().zip(reference).map(|(h, r)| (h.1 - r.1).abs()).sum::<f64>() / n;
    Ok((start * 1000.0, duration * 1000.0))
}

/// Histogram over fixed-width bins anchored at the minimum value.
#[derive(Debug, Clone)]
pub struct Histogram {
    /// Bin edges, one more than counts; `edges[i]..edges[i+1]` is bin `i`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Render as CSV with a `bin_start,bin_end,count` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{:.6},{:.6},{c}\n", self.edges[i], self.edges[i + 1]));
        }
        out
    }
}

/// Bin `values` into fixed-width bins spanning their range.  A single
/// distinct value yields one bin containing everything.
pub fn histogram(values: &[f64], bin_width: f64) -> Result<Histogram> {
    if bin_width <= 0.0 || !bin_width.is_finite() {
        return Err(Error::invalid("bin width must be positive and finite"));
    }
    if values.is_empty() {
        return Ok(Histogram { edges: vec![], counts: vec![] });
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::invalid("histogram values must be finite"));
    }
    let bins = (((max - min) / bin_width).ceil() as usize).max(1);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - min) / bin_width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let edges = (0..=bins).map(|i| min + i as f64 * bin_width).collect();
    Ok(Histogram { edges, counts })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identical_sequences_have_zero_error() {
        let r = wer(&w("turn off the lights"), &w("turn off the lights"));
        assert_eq!(r.errors, 0);
        assert_eq!(r.rate, 0.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn swapped_pair_costs_two_errors() {
        let r = wer(&w("a b"), &w("b a"));
        assert_eq!(r.errors, 2);
        assert_eq!(r.rate, 1.0);
    }

    #[test]
    fn mixed_edits_count_each_operation() {
        // one substitution, one deletion, one insertion
        let r = wer(&w("the cat sat on the mat"), &w("the dog sat on the mat too"));
        assert_eq!(r.errors, 2);
        let r = wer(&w("a b c"), &w("a c"));
        assert_eq!(r.errors, 1);
        let r = wer(&w("a c"), &w("a b c"));
        assert_eq!(r.errors, 1);
    }

    #[test]
    fn empty_reference_is_flagged_not_fatal() {
        let r = wer(&w(""), &w("hello there"));
        assert!(r.degenerate);
        assert_eq!(r.errors, 2);
        assert_eq!(r.rate, 2.0);
        let ok = wer::<&str>(&[], &[]);
        assert!(!ok.degenerate);
        assert_eq!(ok.rate, 0.0);
    }

    #[test]
    fn error_count_is_bounded_by_the_longer_side() {
        // Edit distance can never exceed max(len) or undercut the length gap.
        let cases = [("a b c d", "x y"), ("a", "a b c"), ("q r s", "")];
        for (r, h) in cases {
            let res = wer(&w(r), &w(h));
            let (rl, hl) = (w(r).len(), w(h).len());
            assert!(res.errors <= rl.max(hl));
            assert!(res.errors >= rl.abs_diff(hl));
        }
    }

    #[test]
    fn neer_ignores_non_entity_errors() {
        let reference = w("call alice now");
        let mask = [false, true, false];
        let out = neer(&reference, &w("call alice later"), &mask).unwrap();
        assert_eq!(out, Some(0.0));
    }

    #[test]
    fn neer_counts_entity_substitutions() {
        // Four entity tokens, one substituted.
        let reference = w("alice bob carol dave");
        let mask = [true, true, true, true];
        let out = neer(&reference, &w("alice bob karl dave"), &mask).unwrap();
        assert_eq!(out, Some(0.25));
    }

    #[test]
    fn neer_without_entities_is_none() {
        let reference = w("just words");
        assert_eq!(neer(&reference, &w("just words"), &[false, false]).unwrap(), None);
        assert!(neer(&reference, &w("just words"), &[false]).is_err());
    }

    #[test]
    fn neer_attributes_inside_insertions_only() {
        let reference = w("alice bob");
        let mask = [true, true];
        // Insertion between two entities counts.
        let out = neer(&reference, &w("alice x bob"), &mask).unwrap();
        assert_eq!(out, Some(0.5));
        // Trailing insertion after the entity region does not.
        let out = neer(&reference, &w("alice bob x"), &mask).unwrap();
        assert_eq!(out, Some(0.0));
    }

    #[test]
    fn segmentation_mae_matches_hand_sums() {
        let hyp_starts = [84.0, 388.0, 1024.0, 1469.0, 1573.0, 1875.0];
        let ref_starts = [141.0, 362.0, 992.0, 1512.0, 1649.0, 1864.0];
        let hyp_durs = [270.0, 597.0, 423.0, 73.0, 256.0, 600.0];
        let ref_durs = [221.0, 630.0, 520.0, 137.0, 215.0, 587.0];
        let hyp: Vec<(f64, f64)> =
            hyp_starts.iter().zip(&hyp_durs).map(|(&s, &d)| (s / 1000.0, d / 1000.0)).collect();
        let reference: Vec<(f64, f64)> =
            ref_starts.iter().zip(&ref_durs).map(|(&s, &d)| (s / 1000.0, d / 1000.0)).collect();
        let (mu_start, mu_dur) = segmentation_mae(&hyp, &reference).unwrap();
        assert!((mu_start - 245.0 / 6.0).abs() < 1e-9, "{mu_start}");
        assert!((mu_dur - 49.5).abs() < 1e-9, "{mu_dur}");
        assert!(segmentation_mae(&hyp[..3], &reference).is_err());
    }

    #[test]
    fn histogram_covers_the_range() {
        let h = histogram(&[0.1, 0.12, 0.3, 0.55], 0.1).unwrap();
        assert_eq!(h.counts.len(), 5);
        assert_eq!(h.total(), 4);
        assert_eq!(h.counts[0], 2);
        assert!((h.edges[0] - 0.1).abs() < 1e-12);
        assert!(*h.edges.last().unwrap() >= 0.55);
        // Maximum value lands in the last bin, not out of range.
        assert_eq!(h.counts[4], 1);
    }

    #[test]
    fn histogram_single_value_and_errors() {
        let h = histogram(&[2.5], 1.0).unwrap();
        assert_eq!(h.counts, vec![1]);
        assert!(histogram(&[1.0], 0.0).is_err());
        let empty = histogram(&[], 1.0).unwrap();
        assert_eq!(empty.total(), 0);
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_start,bin_end,count\n"));
        assert!(csv.lines().count() == 2);
    }
}
