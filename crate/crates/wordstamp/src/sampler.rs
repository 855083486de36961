//! Per-utterance timestamped vocabulary sampling.
//!
//! The timestamped training stream cannot afford a score over every
//! (word, timestamp) pair, so each utterance gets a sampled vocabulary of
//! `m` entries: the reference pairs verbatim, one timestamp-perturbed copy
//! of each reference, and random non-reference words carrying perturbed
//! reference timestamps as negatives.

use crate::scoring::{EmbeddingMatrix, SampleEntry, Timestamp, TimestampedVocab};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Default Gaussian sigma, in seconds, for timestamp perturbation.
pub const DEFAULT_SIGMA: f64 = 0.08;

/// Smallest duration a perturbed timestamp may carry, in seconds.
pub const MIN_DURATION: f64 = 0.02;

/// Add independent Gaussian noise to start and duration; the duration is
/// clamped below at [`MIN_DURATION`] so no entry claims a degenerate span.
pub fn perturb(stamp: Timestamp, sigma: f64, rng: &mut impl Rng) -> Timestamp {
    let noise = Normal::new(0.0, sigma).expect("sigma must be finite and nonnegative");
    Timestamp {
        start: stamp.start + noise.sample(rng),
        duration: (stamp.duration + noise.sample(rng)).max(MIN_DURATION),
    }
}

/// Build the sampled vocabulary for one utterance.
///
/// `refs` lists the utterance's (word index, timestamp) pairs in order.
/// The result holds exactly `m` entries: first the references verbatim
/// (flagged), then one perturbed copy per reference, then
/// `m - 2 * refs.len()` distinct non-reference words, each cycled onto a
/// perturbed reference timestamp.
pub fn build_sample_vocab(
    refs: &[(usize, Timestamp)],
    base: &EmbeddingMatrix,
    m: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<TimestampedVocab> {
    if refs.is_empty() {
        return Err(Error::invalid("cannot sample a vocabulary for an empty reference"));
    }
    if m < 3 * refs.len() {
        return Err(Error::invalid(format!(
            "sample size {m} below 3x reference length {}",
            refs.len()
        )));
    }
    for &(w, _) in refs {
        if w >= base.len() {
            return Err(Error::invalid(format!("reference word {w} outside base vocabulary")));
        }
    }

    let mut entries = Vec::with_capacity(m);
    for &(w, stamp) in refs {
        entries.push(SampleEntry {
            word: w,
            vector: base.vector(w).to_vec(),
            stamp,
            is_reference: true,
        });
    }
    for &(w, stamp) in refs {
        entries.push(SampleEntry {
            word: w,
            vector: base.vector(w).to_vec(),
            stamp: perturb(stamp, sigma, rng),
            is_reference: false,
        });
    }

    let ref_words: std::collections::HashSet<usize> = refs.iter().map(|&(w, _)| w).collect();
    let mut pool: Vec<usize> = (0..base.len()).filter(|w| !ref_words.contains(w)).collect();
    let need = m - 2 * refs.len();
    if need > pool.len() {
        return Err(Error::invalid(format!(
            "need {need} negative words but only {} non-reference words exist",
            pool.len()
        )));
    }
    // Partial Fisher-Yates: draws without replacement.
    for i in 0..need {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
        let w = pool[i];
        let (_, ref_stamp) = refs[i % refs.len()];
        entries.push(SampleEntry {
            word: w,
            vector: base.vector(w).to_vec(),
            stamp: perturb(ref_stamp, sigma, rng),
            is_reference: false,
        });
    }
    Ok(TimestampedVocab { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn base(n: usize) -> EmbeddingMatrix {
        let mut m = EmbeddingMatrix::new(2).unwrap();
        for w in 0..n {
            m.push(format!("w{w}"), vec![w as f64, 1.0]).unwrap();
        }
        m
    }

    fn refs3() -> Vec<(usize, Timestamp)> {
        vec![
            (0, Timestamp::new(0.10, 0.20)),
            (4, Timestamp::new(0.40, 0.15)),
            (7, Timestamp::new(0.70, 0.30)),
        ]
    }

    #[test]
    fn vocabulary_has_the_documented_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = build_sample_vocab(&refs3(), &base(20), 12, DEFAULT_SIGMA, &mut rng).unwrap();
        assert_eq!(v.len(), 12);
        let refs: Vec<_> = v.entries.iter().filter(|e| e.is_reference).collect();
        assert_eq!(refs.len(), 3);
        // References come first and verbatim.
        for (entry, (w, stamp)) in v.entries.iter().zip(refs3()) {
            assert!(entry.is_reference);
            assert_eq!(entry.word, w);
            assert_eq!(entry.stamp, stamp);
        }
        // Then one perturbed copy per reference word.
        for (entry, (w, _)) in v.entries[3..6].iter().zip(refs3()) {
            assert!(!entry.is_reference);
            assert_eq!(entry.word, w);
        }
        // Then 6 distinct non-reference words.
        let negatives: Vec<usize> = v.entries[6..].iter().map(|e| e.word).collect();
        assert_eq!(negatives.len(), 6);
        let unique: std::collections::HashSet<_> = negatives.iter().collect();
        assert_eq!(unique.len(), 6, "negatives drawn without replacement");
        for w in negatives {
            assert!(![0usize, 4, 7].contains(&w));
        }
    }

    #[test]
    fn sample_size_and_pool_preconditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(build_sample_vocab(&refs3(), &base(20), 8, 0.08, &mut rng).is_err());
        // 20-word base: 17 non-reference words < 24 negatives needed.
        assert!(build_sample_vocab(&refs3(), &base(20), 30, 0.08, &mut rng).is_err());
    }

    #[test]
    fn same_seed_reproduces_the_vocabulary() {
        let a = build_sample_vocab(
            &refs3(),
            &base(30),
            15,
            0.08,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = build_sample_vocab(
            &refs3(),
            &base(30),
            15,
            0.08,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.word, y.word);
            assert_eq!(x.stamp, y.stamp);
            assert_eq!(x.is_reference, y.is_reference);
        }
    }

    #[test]
    fn perturbation_noise_has_the_requested_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stamp = Timestamp::new(5.0, 1.0);
        let sigma = 0.08;
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let delta = perturb(stamp, sigma, &mut rng).start - stamp.start;
            sum += delta;
            sum_sq += delta * delta;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!((std - sigma).abs() / sigma < 0.05, "empirical sigma {std}");
    }

    #[test]
    fn perturbed_durations_never_collapse() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stamp = Timestamp::new(0.5, 0.03);
        for _ in 0..5_000 {
            assert!(perturb(stamp, 0.2, &mut rng).duration >= MIN_DURATION);
        }
    }

    #[test]
    fn negatives_are_drawn_uniformly() {
        // Chi-square goodness of fit over the non-reference pool.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = base(23);
        let refs = refs3();
        let pool: Vec<usize> = (0..23).filter(|w| ![0usize, 4, 7].contains(w)).collect();
        let mut counts = std::collections::HashMap::new();
        let draws = 20_000;
        let per_draw = 4; // m = 10 -> 4 negatives
        for _ in 0..draws {
            let v = build_sample_vocab(&refs, &base, 10, 0.08, &mut rng).unwrap();
            for e in &v.entries[6..] {
                *counts.entry(e.word).or_insert(0usize) += 1;
            }
        }
        let expected = (draws * per_draw) as f64 / pool.len() as f64;
        let chi2: f64 = pool
            .iter()
            .map(|w| {
                let obs = *counts.get(w).unwrap_or(&0) as f64;
                (obs - expected) * (obs - expected) / expected
            })
            .sum();
        let dof = (pool.len() - 1) as f64;
        let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2:.1} with {dof} dof gives p {p:.4}");
    }
}
