//! Synthetic corpus generation and the corpus file format.
//!
//! An utterance is a feature sequence plus a word-level transcript with
//! per-word (start, duration) references.  The generator renders each word
//! as a block of frames carrying a fixed orthonormal mixing of the word's
//! embedding plus Gaussian noise, separated by noise-only silence gaps, so
//! the reference timestamps are exact frame boundaries.
//!
//! With a nonzero confusable fraction the generator also emits utterance
//! pairs that share identical features but segment one stretch differently:
//! one long word versus a shorter word followed by a filler word.  The last
//! three vocabulary words are reserved for that construction.

use crate::scoring::{EmbeddingMatrix, Timestamp};
use crate::textio::{fmt_f64, parse_field, write_atomic};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::io::BufRead;
use std::path::Path;

/// One utterance: id, per-frame features, and the word-level reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Vec<Vec<f64>>,
    pub words: Vec<String>,
    pub stamps: Vec<Timestamp>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.len()
    }

    /// Map transcript words to 1-based score indices (matrix index + 1).
    pub fn word_labels(&self, vocab: &EmbeddingMatrix) -> Result<Vec<usize>> {
        self.words
            .iter()
            .map(|w| {
                vocab
                    .index_of(w)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::invalid(format!("word {w:?} not in vocabulary")))
            })
            .collect()
    }
}

/// Generator parameters.
#[derive(Debug, Clone)]
pub struct GenSpec {
    pub vocab_size: usize,
    pub dim: usize,
    /// Words per utterance, inclusive range.
    pub words_min: usize,
    pub words_max: usize,
    /// Frames per word, inclusive range.
    pub frames_min: usize,
    pub frames_max: usize,
    /// Silence frames around and between words, inclusive range.
    pub gap_min: usize,
    pub gap_max: usize,
    /// Standard deviation of the per-coordinate feature noise.
    pub noise_std: f64,
    /// Fraction of generated utterances that belong to confusable pairs.
    pub confusable_fraction: f64,
    /// Seconds per frame.
    pub frame_period: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            vocab_size: 50,
            dim: 16,
            words_min: 3,
            words_max: 6,
            frames_min: 3,
            frames_max: 5,
            gap_min: 1,
            gap_max: 4,
            noise_std: 0.05,
            confusable_fraction: 0.0,
            frame_period: 0.040,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocabulary needs at least two words"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        if self.words_min == 0 || self.words_min > self.words_max {
            return Err(Error::invalid("bad words-per-utterance range"));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::invalid("bad frames-per-word range"));
        }
        if self.gap_min > self.gap_max {
            return Err(Error::invalid("bad silence gap range"));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return Err(Error::invalid("confusable fraction must lie in [0, 1]"));
        }
        if self.confusable_fraction > 0.0 && self.vocab_size < 6 {
            return Err(Error::invalid("confusable pairs need at least six words"));
        }
        if self.frame_period <= 0.0 {
            return Err(Error::invalid("frame period must be positive"));
        }
        Ok(())
    }

    /// Index of the long word of the reserved confusable triple.
    pub fn confusable_long(&self) -> usize {
        self.vocab_size - 3
    }

    /// Index of the short replacement word.
    pub fn confusable_short(&self) -> usize {
        self.vocab_size - 2
    }

    /// Index of the filler word completing the replacement.
    pub fn confusable_filler(&self) -> usize {
        self.vocab_size - 1
    }
}

/// Draw a fresh embedding matrix with standard Gaussian coordinates and
/// ids `w000`, `w001`, ...
pub fn gen_embeddings(spec: &GenSpec, rng: &mut impl Rng) -> Result<EmbeddingMatrix> {
    spec.validate()?;
    let mut m = EmbeddingMatrix::new(spec.dim)?;
    for w in 0..spec.vocab_size {
        let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
        m.push(format!("w{w:03}"), v)?;
    }
    Ok(m)
}

// The mixing applied to every rendered word: a fixed rotation drawn once
// from a constant seed, so corpora are reproducible across runs.
fn mixing_matrix(dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5157_u64);
    let mut rows: Vec<Vec<f64>> = (0..dim)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    // Gram-Schmidt; a fresh Gaussian matrix is almost surely full rank.
    for i in 0..dim {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let proj: Vec<f64> = rows[j].iter().map(|x| x * dot).collect();
            for (a, p) in rows[i].iter_mut().zip(proj) {
                *a -= p;
            }
        }
        let norm = rows[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        for a in rows[i].iter_mut() {
            *a /= norm;
        }
    }
    rows
}

fn mix(mixing: &[Vec<f64>], g: &[f64]) -> Vec<f64> {
    mixing.iter().map(|row| row.iter().zip(g).map(|(m, x)| m * x).sum()).collect()
}

struct Renderer<'a> {
    spec: &'a GenSpec,
    base: &'a EmbeddingMatrix,
    mixing: Vec<Vec<f64>>,
    noise: Normal<f64>,
}

impl<'a> Renderer<'a> {
    fn new(spec: &'a GenSpec, base: &'a EmbeddingMatrix) -> Result<Self> {
        spec.validate()?;
        if base.len() != spec.vocab_size || base.dim() != spec.dim {
            return Err(Error::invalid("embedding matrix does not match the generator spec"));
        }
        Ok(Renderer {
            spec,
            base,
            mixing: mixing_matrix(spec.dim),
            noise: Normal::new(0.0, spec.noise_std).expect("noise std must be nonnegative"),
        })
    }

    fn silence(&self, frames: usize, rng: &mut impl Rng, out: &mut Vec<Vec<f64>>) {
        for _ in 0..frames {
            out.push((0..self.spec.dim).map(|_| self.noise.sample(rng)).collect());
        }
    }

    fn word(&self, word: usize, frames: usize, rng: &mut impl Rng, out: &mut Vec<Vec<f64>>) {
        let clean = mix(&self.mixing, self.base.vector(word));
        for _ in 0..frames {
            out.push(clean.iter().map(|x| x + self.noise.sample(rng)).collect());
        }
    }
}

/// Generate one utterance with the given id.
pub fn gen_utterance(
    spec: &GenSpec,
    base: &EmbeddingMatrix,
    id: impl Into<String>,
    rng: &mut impl Rng,
) -> Result<Utterance> {
    let renderer = Renderer::new(spec, base)?;
    // Reserved confusable words only ever appear in pair utterances.
    let free_words = if spec.confusable_fraction > 0.0 {
        spec.vocab_size - 3
    } else {
        spec.vocab_size
    };
    let count = rng.random_range(spec.words_min..=spec.words_max);
    let words: Vec<usize> = (0..count).map(|_| rng.random_range(0..free_words)).collect();
    Ok(render_utterance(&renderer, id, &words, rng))
}

fn render_utterance(
    renderer: &Renderer,
    id: impl Into<String>,
    words: &[usize],
    rng: &mut impl Rng,
) -> Utterance {
    let spec = renderer.spec;
    let fp = spec.frame_period;
    let mut features = Vec::new();
    let mut stamps = Vec::new();
    renderer.silence(rng.random_range(spec.gap_min..=spec.gap_max), rng, &mut features);
    for (i, &w) in words.iter().enumerate() {
        if i > 0 {
            renderer.silence(rng.random_range(spec.gap_min..=spec.gap_max), rng, &mut features);
        }
        let frames = rng.random_range(spec.frames_min..=spec.frames_max);
        stamps.push(Timestamp::new(features.len() as f64 * fp, frames as f64 * fp));
        renderer.word(w, frames, rng, &mut features);
    }
    renderer.silence(rng.random_range(spec.gap_min..=spec.gap_max), rng, &mut features);
    Utterance {
        id: id.into(),
        features,
        words: words.iter().map(|&w| renderer.base.id(w).to_string()).collect(),
        stamps,
    }
}

/// Generate a confusable pair: two utterances with bitwise-identical
/// features whose transcripts differ on one stretch, read either as the
/// reserved long word or as the short word plus the filler.
pub fn gen_confusable_pair(
    spec: &GenSpec,
    base: &EmbeddingMatrix,
    id_a: impl Into<String>,
    id_b: impl Into<String>,
    rng: &mut impl Rng,
) -> Result<(Utterance, Utterance)> {
    let renderer = Renderer::new(spec, base)?;
    if spec.vocab_size < 6 {
        return Err(Error::invalid("confusable pairs need at least six words"));
    }
    let fp = spec.frame_period;
    let free_words = spec.vocab_size - 3;
    let long = spec.confusable_long();
    let short = spec.confusable_short();
    let filler = spec.confusable_filler();

    let ctx_before: Vec<usize> =
        (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..free_words)).collect();
    let ctx_after: Vec<usize> =
        (0..rng.random_range(1..=2)).map(|_| rng.random_range(0..free_words)).collect();

    let mut features = Vec::new();
    let mut ctx_stamps = Vec::new();
    renderer.silence(rng.random_range(spec.gap_min..=spec.gap_max), rng, &mut features);
    for &w in &ctx_before {
        let frames = rng.random_range(spec.frames_min..=spec.frames_max);
        ctx_stamps.push(Timestamp::new(features.len() as f64 * fp, frames as f64 * fp));
        renderer.word(w, frames, rng, &mut features);
        renderer.silence(rng.random_range(spec.gap_min..=spec.gap_max), rng, &mut features);
    }

    // The ambiguous stretch renders the short word then the filler; the
    // first transcript claims the whole stretch as the long word.
    let k1 = rng.random_range(spec.frames_min..=spec.frames_max);
    let k2 = spec.frames_min;
    let span_start = features.len();
    renderer.word(short, k1, rng, &mut features);
    let filler_start = features.len();
    renderer.word(filler, k2, rng, &mut features);

    let mut tail_stamps = Vec::new();
    for &w in &ctx_after {
        renderer.silence(rng.random_range(spec.gap_min..=spec.gap_max), rng, &mut features);
        let frames = rng.random_range(spec.frames_min..=spec.frames_max);
        tail_stamps.push(Timestamp::new(features.len() as f64 * fp, frames as f64 * fp));
        renderer.word(w, frames, rng, &mut features);
    }
    renderer.silence(rng.random_range(spec.gap_min..=spec.gap_max), rng, &mut features);

    let word_id = |w: usize| base.id(w).to_string();
    let mut words_a: Vec<String> = ctx_before.iter().map(|&w| word_id(w)).collect();
    let mut stamps_a = ctx_stamps.clone();
    words_a.push(word_id(long));
    stamps_a.push(Timestamp::new(span_start as f64 * fp, (k1 + k2) as f64 * fp));

    let mut words_b: Vec<String> = ctx_before.iter().map(|&w| word_id(w)).collect();
    let mut stamps_b = ctx_stamps;
    words_b.push(word_id(short));
    stamps_b.push(Timestamp::new(span_start as f64 * fp, k1 as f64 * fp));
    words_b.push(word_id(filler));
    stamps_b.push(Timestamp::new(filler_start as f64 * fp, k2 as f64 * fp));

    for (words, stamps) in [(&mut words_a, &mut stamps_a), (&mut words_b, &mut stamps_b)] {
        words.extend(ctx_after.iter().map(|&w| word_id(w)));
        stamps.extend(tail_stamps.iter().copied());
    }

    Ok((
        Utterance { id: id_a.into(), features: features.clone(), words: words_a, stamps: stamps_a },
        Utterance { id: id_b.into(), features, words: words_b, stamps: stamps_b },
    ))
}

/// Generate `count` utterances; a `confusable_fraction` share of them are
/// confusable pair members.  Deterministic in `seed`.
pub fn gen_corpus(
    spec: &GenSpec,
    base: &EmbeddingMatrix,
    count: usize,
    seed: u64,
) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = ((count as f64 * spec.confusable_fraction / 2.0).round() as usize)
        .min(count / 2);
    let singles = count - 2 * pairs;
    let mut out = Vec::with_capacity(count);
    for i in 0..singles {
        out.push(gen_utterance(spec, base, format!("u{i:05}"), &mut rng)?);
    }
    for p in 0..pairs {
        let (a, b) = gen_confusable_pair(
            spec,
            base,
            format!("u{:05}", singles + 2 * p),
            format!("u{:05}", singles + 2 * p + 1),
            &mut rng,
        )?;
        out.push(a);
        out.push(b);
    }
    Ok(out)
}

fn ms(seconds: f64) -> i64 {
    (seconds * 1000.0).round() as i64
}

/// Serialize utterances one per line: tab-separated id, `T F`, flattened
/// features, words, starts in ms, durations in ms.  Feature values
/// round-trip exactly; times are integer milliseconds.
pub fn corpus_to_string(utts: &[Utterance]) -> String {
    let mut out = String::new();
    for u in utts {
        let t = u.frames();
        let f = u.features.first().map_or(0, Vec::len);
        out.push_str(&u.id);
        out.push('\t');
        out.push_str(&format!("{t} {f}"));
        out.push('\t');
        let mut first = true;
        for row in &u.features {
            for x in row {
                if !first {
                    out.push(' ');
                }
                out.push_str(&fmt_f64(*x));
                first = false;
            }
        }
        out.push('\t');
        out.push_str(&u.words.join(" "));
        out.push('\t');
        out.push_str(&u.stamps.iter().map(|s| ms(s.start).to_string()).collect::<Vec<_>>().join(" "));
        out.push('\t');
        out.push_str(
            &u.stamps.iter().map(|s| ms(s.duration).to_string()).collect::<Vec<_>>().join(" "),
        );
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: &Path, utts: &[Utterance]) -> Result<()> {
    write_atomic(path, &corpus_to_string(utts))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let file = std::fs::File::open(path)?;
    parse_corpus(std::io::BufReader::new(file))
}

pub fn parse_corpus(r: impl BufRead) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                line_no,
                format!("expected 6 tab-separated fields, got {}", fields.len()),
            ));
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(Error::parse(line_no, "empty utterance id"));
        }
        let mut shape = fields[1].split_whitespace();
        let t: usize = parse_field(
            shape.next().ok_or_else(|| Error::parse(line_no, "missing frame count"))?,
            line_no,
            "frame count",
        )?;
        let f: usize = parse_field(
            shape.next().ok_or_else(|| Error::parse(line_no, "missing feature dim"))?,
            line_no,
            "feature dim",
        )?;
        let flat = fields[2]
            .split_whitespace()
            .map(|x| parse_field::<f64>(x, line_no, "feature"))
            .collect::<Result<Vec<f64>>>()?;
        if flat.len() != t * f {
            return Err(Error::parse(
                line_no,
                format!("expected {} feature values, got {}", t * f, flat.len()),
            ));
        }
        let features: Vec<Vec<f64>> = flat.chunks(f.max(1)).map(<[f64]>::to_vec).collect();
        let words: Vec<String> =
            fields[3].split_whitespace().map(str::to_string).collect();
        let starts = fields[4]
            .split_whitespace()
            .map(|x| parse_field::<i64>(x, line_no, "start_ms"))
            .collect::<Result<Vec<i64>>>()?;
        let durations = fields[5]
            .split_whitespace()
            .map(|x| parse_field::<i64>(x, line_no, "duration_ms"))
            .collect::<Result<Vec<i64>>>()?;
        if starts.len() != words.len() || durations.len() != words.len() {
            return Err(Error::parse(
                line_no,
                format!(
                    "{} words but {} starts and {} durations",
                    words.len(),
                    starts.len(),
                    durations.len()
                ),
            ));
        }
        let stamps = starts
            .iter()
            .zip(&durations)
            .map(|(&s, &d)| Timestamp::new(s as f64 / 1000.0, d as f64 / 1000.0))
            .collect();
        out.push(Utterance { id, features, words, stamps });
    }
    Ok(out)
}
