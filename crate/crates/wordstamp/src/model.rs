//! Trainable frame encoder with manual backpropagation.
//!
//! The encoder is a two-hidden-layer tanh perceptron applied per frame
//! over a context window of neighboring feature frames.  Its output
//! vector packs, in order, `L` word embeddings, the two blank magnitudes,
//! and `L` raw (offset, duration) pairs that the bounded heads turn into
//! timestamps.  Training minimizes the summed word-stream and
//! timestamped-stream CTC losses with plain gradient descent under a
//! warmup / inverse-sqrt / exponential-decay learning-rate schedule, and
//! keeps the epoch with the lowest held-out word error rate.

use rayon::prelude::*;

use crate::corpus::Utterance;
use crate::ctc;
use crate::decoder::{decode, DecoderConfig};
use crate::lm::UniformLm;
use crate::metrics;
use crate::sampler;
use crate::scoring::{
    log_softmax, multi_hyp_scores, timestamped_scores_detail, EmbeddingMatrix, FrameOutput,
    Timestamp, TimestampedVocab,
};
use crate::textio::{fmt_f64, parse_field, write_atomic};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::BufRead;
use std::path::Path;

/// Output-head ranges: timestamps are produced as bounded offsets from the
/// frame's own time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    /// Start offsets lie strictly within ± this many seconds of the frame
    /// time (scaled tanh).
    pub offset_limit: f64,
    /// Durations lie strictly within (0, this) seconds (scaled sigmoid).
    pub duration_scale: f64,
    /// Seconds per frame.
    pub frame_period: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { offset_limit: 1.0, duration_scale: 2.0, frame_period: 0.040 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.offset_limit > 0.0 && self.duration_scale > 0.0 && self.frame_period > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("head ranges must be positive"))
        }
    }
}

/// Encoder architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Width of one input feature frame.
    pub feature_dim: usize,
    /// Width of each predicted word embedding.
    pub embed_dim: usize,
    /// Number of embedding hypotheses per frame (`L`).
    pub hypotheses: usize,
    /// Sizes of the two hidden layers.
    pub hidden: (usize, usize),
    /// Context frames on each side of the current frame (window size is
    /// `2 * context + 1`).
    pub context: usize,
    pub heads: HeadConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            feature_dim: 16,
            embed_dim: 16,
            hypotheses: 1,
            hidden: (64, 64),
            context: 2,
            heads: HeadConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.embed_dim == 0
            || self.hypotheses == 0
            || self.hidden.0 == 0
            || self.hidden.1 == 0
        {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        self.heads.validate()
    }

    pub fn input_width(&self) -> usize {
        (2 * self.context + 1) * self.feature_dim
    }

    /// `L` embeddings, two blank magnitudes, and `L` raw (offset,
    /// duration) pairs.
    pub fn output_width(&self) -> usize {
        self.hypotheses * self.embed_dim + 2 + 2 * self.hypotheses
    }
}

// Dense row-major matrix; just enough linear algebra for the perceptron.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        Matrix { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    // y = W x
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, out) in y.iter_mut().enumerate() {
            *out = self.row(r).iter().zip(x).map(|(w, v)| w * v).sum();
        }
    }

    // y = W^T v
    fn tmatvec(&self, v: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for r in 0..self.rows {
            let row = self.row(r);
            let s = v[r];
            for (out, w) in y.iter_mut().zip(row) {
                *out += w * s;
            }
        }
    }

    // W += outer(v, x)
    fn add_outer(&mut self, v: &[f64], x: &[f64]) {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let s = v[r];
            for (w, xv) in row.iter_mut().zip(x) {
                *w += s * xv;
            }
        }
    }
}

/// All encoder parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    cfg: EncoderConfig,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    w3: Matrix,
    b3: Vec<f64>,
}

/// Parameter gradients, same shapes as [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    w3: Matrix,
    b3: Vec<f64>,
}

impl Gradients {
    fn zeros(cfg: &EncoderConfig) -> Self {
        Gradients {
            w1: Matrix::zeros(cfg.hidden.0, cfg.input_width()),
            b1: vec![0.0; cfg.hidden.0],
            w2: Matrix::zeros(cfg.hidden.1, cfg.hidden.0),
            b2: vec![0.0; cfg.hidden.1],
            w3: Matrix::zeros(cfg.output_width(), cfg.hidden.1),
            b3: vec![0.0; cfg.output_width()],
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        let pairs = [
            (&mut self.w1.data, &other.w1.data),
            (&mut self.w2.data, &other.w2.data),
            (&mut self.w3.data, &other.w3.data),
            (&mut self.b1, &other.b1),
            (&mut self.b2, &other.b2),
            (&mut self.b3, &other.b3),
        ];
        for (dst, src) in pairs {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for buf in [
            &mut self.w1.data,
            &mut self.w2.data,
            &mut self.w3.data,
            &mut self.b1,
            &mut self.b2,
            &mut self.b3,
        ] {
            for v in buf.iter_mut() {
                *v *= c;
            }
        }
    }
}

// Per-frame forward cache for backpropagation.
struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    h1: Vec<Vec<f64>>,
    h2: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl EncoderParams {
    /// Seeded uniform (Glorot-style) initialization; biases start at zero.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = Matrix::glorot(cfg.hidden.0, cfg.input_width(), &mut rng);
        let w2 = Matrix::glorot(cfg.hidden.1, cfg.hidden.0, &mut rng);
        let w3 = Matrix::glorot(cfg.output_width(), cfg.hidden.1, &mut rng);
        Ok(EncoderParams {
            b1: vec![0.0; w1.rows],
            b2: vec![0.0; w2.rows],
            b3: vec![0.0; w3.rows],
            cfg,
            w1,
            w2,
            w3,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.w1.data.len()
            + self.b1.len()
            + self.w2.data.len()
            + self.b2.len()
            + self.w3.data.len()
            + self.b3.len()
    }

    // Flat parameter views in a fixed order, for finite differences and
    // the SGD update.
    fn buffers(&self) -> [&[f64]; 6] {
        [&self.w1.data, &self.b1, &self.w2.data, &self.b2, &self.w3.data, &self.b3]
    }

    fn buffers_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
            &mut self.w3.data,
            &mut self.b3,
        ]
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for buf in self.buffers() {
            if idx < buf.len() {
                return buf[idx];
            }
            idx -= buf.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for buf in self.buffers_mut() {
            if idx < buf.len() {
                buf[idx] = value;
                return;
            }
            idx -= buf.len();
        }
        panic!("parameter index out of range");
    }

    /// Gradient entry at the flat index used by [`Self::get_param`].
    pub fn grad_param(grads: &Gradients, mut idx: usize) -> f64 {
        let bufs: [&[f64]; 6] =
            [&grads.w1.data, &grads.b1, &grads.w2.data, &grads.b2, &grads.w3.data, &grads.b3];
        for buf in bufs {
            if idx < buf.len() {
                return buf[idx];
            }
            idx -= buf.len();
        }
        panic!("gradient index out of range");
    }

    /// One SGD step: `params -= lr * grads`.
    pub fn step(&mut self, grads: &Gradients, lr: f64) {
        let dsts = self.buffers_mut();
        let srcs: [&[f64]; 6] =
            [&grads.w1.data, &grads.b1, &grads.w2.data, &grads.b2, &grads.w3.data, &grads.b3];
        for (dst, src) in dsts.into_iter().zip(srcs) {
            for (d, g) in dst.iter_mut().zip(src) {
                *d -= lr * g;
            }
        }
    }

    fn window_input(&self, features: &[Vec<f64>], t: usize) -> Vec<f64> {
        let c = self.cfg.context as isize;
        let f = self.cfg.feature_dim;
        let mut x = Vec::with_capacity(self.cfg.input_width());
        for off in -c..=c {
            let idx = t as isize + off;
            if idx < 0 || idx as usize >= features.len() {
                x.extend(std::iter::repeat_n(0.0, f));
            } else {
                x.extend_from_slice(&features[idx as usize]);
            }
        }
        x
    }

    fn forward(&self, features: &[Vec<f64>]) -> Result<(Vec<FrameOutput>, ForwardCache)> {
        if features.is_empty() {
            return Err(Error::invalid("cannot encode an empty feature sequence"));
        }
        for row in features {
            if row.len() != self.cfg.feature_dim {
                return Err(Error::DimMismatch {
                    expected: self.cfg.feature_dim,
                    got: row.len(),
                });
            }
        }
        let mut outputs = Vec::with_capacity(features.len());
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(features.len()),
            h1: Vec::with_capacity(features.len()),
            h2: Vec::with_capacity(features.len()),
            raw: Vec::with_capacity(features.len()),
        };
        let l = self.cfg.hypotheses;
        let dim = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        for t in 0..features.len() {
            let x = self.window_input(features, t);
            let mut h1 = vec![0.0; self.cfg.hidden.0];
            self.w1.matvec(&x, &mut h1);
            for (h, b) in h1.iter_mut().zip(&self.b1) {
                *h = (*h + b).tanh();
            }
            let mut h2 = vec![0.0; self.cfg.hidden.1];
            self.w2.matvec(&h1, &mut h2);
            for (h, b) in h2.iter_mut().zip(&self.b2) {
                *h = (*h + b).tanh();
            }
            let mut raw = vec![0.0; self.cfg.output_width()];
            self.w3.matvec(&h2, &mut raw);
            for (r, b) in raw.iter_mut().zip(&self.b3) {
                *r += b;
            }

            let embeddings: Vec<Vec<f64>> =
                (0..l).map(|k| raw[k * dim..(k + 1) * dim].to_vec()).collect();
            let blank = raw[l * dim];
            let blank_z = raw[l * dim + 1];
            let frame_time = t as f64 * heads.frame_period;
            let stamps: Vec<Timestamp> = (0..l)
                .map(|k| Timestamp {
                    start: frame_time + heads.offset_limit * raw[l * dim + 2 + k].tanh(),
                    duration: heads.duration_scale * sigmoid(raw[l * dim + 2 + l + k]),
                })
                .collect();
            outputs.push(FrameOutput { embeddings, blank, blank_z, stamps });
            cache.inputs.push(x);
            cache.h1.push(h1);
            cache.h2.push(h2);
            cache.raw.push(raw);
        }
        Ok((outputs, cache))
    }

    /// Encode a feature sequence into per-frame outputs.
    pub fn encode(&self, features: &[Vec<f64>]) -> Result<Vec<FrameOutput>> {
        Ok(self.forward(features)?.0)
    }

    /// Combined two-stream CTC loss of one utterance and its gradient.
    ///
    /// `words` are 1-based word-grid labels (vocabulary index + 1);
    /// `stamps` are the reference timestamps, which must appear verbatim
    /// in `tvocab`.
    pub fn loss_and_gradient(
        &self,
        features: &[Vec<f64>],
        vocab: &EmbeddingMatrix,
        tvocab: &TimestampedVocab,
        words: &[usize],
        stamps: &[Timestamp],
    ) -> Result<(ctc::LossBreakdown, Gradients)> {
        if vocab.dim() != self.cfg.embed_dim {
            return Err(Error::DimMismatch { expected: self.cfg.embed_dim, got: vocab.dim() });
        }
        let (frames, cache) = self.forward(features)?;
        let l = self.cfg.hypotheses;
        let dim = self.cfg.embed_dim;
        let heads = self.cfg.heads;

        // Forward score rows for both streams.
        let word_rows: Vec<Vec<f64>> = frames
            .iter()
            .map(|f| Ok(log_softmax(&multi_hyp_scores(&f.embeddings, vocab, f.blank)?)))
            .collect::<Result<_>>()?;
        let details: Vec<_> =
            frames.iter().map(|f| timestamped_scores_detail(f, tvocab)).collect::<Result<_>>()?;
        let stamp_rows: Vec<Vec<f64>> = details.iter().map(|d| log_softmax(&d.values)).collect();

        let word_grid = ctc::PosteriorGrid::new(word_rows)?;
        let zero_based: Vec<usize> = words.iter().map(|w| w - 1).collect();
        let stamp_labels = ctc::reference_labels(tvocab, &zero_based, stamps)?;
        let stamp_grid = ctc::PosteriorGrid::new(stamp_rows)?;

        let word_loss = -ctc::log_posterior(&word_grid, words)?;
        let stamp_loss = -ctc::log_posterior(&stamp_grid, &stamp_labels)?;
        let loss = ctc::LossBreakdown { word_loss, stamp_loss, total: word_loss + stamp_loss };

        let word_dlogp = ctc::gradient(&word_grid, words)?;
        let stamp_dlogp = ctc::gradient(&stamp_grid, &stamp_labels)?;

        let mut grads = Gradients::zeros(&self.cfg);
        let mut dh2 = vec![0.0; self.cfg.hidden.1];
        let mut dh1 = vec![0.0; self.cfg.hidden.0];
        for (t, frame) in frames.iter().enumerate() {
            let d_word = ctc::grad_through_log_softmax(word_grid.row(t), &word_dlogp[t]);
            let d_stamp = ctc::grad_through_log_softmax(stamp_grid.row(t), &stamp_dlogp[t]);
            let detail = &details[t];
            let raw = &cache.raw[t];
            let mut draw = vec![0.0; self.cfg.output_width()];

            // Word stream.  Each word score is a sum of negated squared
            // distances, so the embedding gradient separates into a shared
            // weighted mean of vocabulary vectors plus a per-embedding
            // rescaling.
            draw[l * dim] += d_word[0] * (-2.0 * frame.blank);
            let coeff: f64 = d_word[1..].iter().sum();
            let mut gvec = vec![0.0; dim];
            for (j, &dw) in d_word[1..].iter().enumerate() {
                if dw != 0.0 {
                    for (gv, g) in gvec.iter_mut().zip(vocab.vector(j)) {
                        *gv += dw * g;
                    }
                }
            }
            for k in 0..l {
                let f = &frame.embeddings[k];
                let df = &mut draw[k * dim..(k + 1) * dim];
                for ((d, fv), gv) in df.iter_mut().zip(f).zip(&gvec) {
                    *d += 2.0 * (gv - coeff * fv);
                }
            }

            // Timestamped stream.  z = s - d + s*d with s summed over
            // embeddings and d the stamp penalty of the best-scoring one.
            draw[l * dim + 1] += d_stamp[0] * (-2.0 * frame.blank_z);
            let mut coeff_z = 0.0;
            let mut vvec = vec![0.0; dim];
            let mut dtau = vec![0.0; l];
            let mut dtheta = vec![0.0; l];
            for (i, entry) in tvocab.entries.iter().enumerate() {
                let dz = d_stamp[i + 1];
                if dz == 0.0 {
                    continue;
                }
                let ds = dz * (1.0 + detail.penalty[i]);
                let dd = dz * (detail.embed_score[i] - 1.0);
                coeff_z += ds;
                for (vv, v) in vvec.iter_mut().zip(&entry.vector) {
                    *vv += ds * v;
                }
                let k = detail.selected[i];
                let st = frame.stamps[k];
                dtau[k] += dd * 2.0 * (st.start - entry.stamp.start);
                dtheta[k] += dd * 2.0 * (st.duration - entry.stamp.duration);
            }
            for k in 0..l {
                let f = &frame.embeddings[k];
                let df = &mut draw[k * dim..(k + 1) * dim];
                for ((d, fv), vv) in df.iter_mut().zip(f).zip(&vvec) {
                    *d += 2.0 * (vv - coeff_z * fv);
                }
            }
            // Head chains: tau = t*fp + ol*tanh(raw), theta = ds*sigmoid(raw).
            for k in 0..l {
                let th = raw[l * dim + 2 + k].tanh();
                draw[l * dim + 2 + k] += dtau[k] * heads.offset_limit * (1.0 - th * th);
                let sg = sigmoid(raw[l * dim + 2 + l + k]);
                draw[l * dim + 2 + l + k] += dtheta[k] * heads.duration_scale * sg * (1.0 - sg);
            }

            // Perceptron backward.
            grads.w3.add_outer(&draw, &cache.h2[t]);
            for (b, d) in grads.b3.iter_mut().zip(&draw) {
                *b += d;
            }
            self.w3.tmatvec(&draw, &mut dh2);
            for (d, h) in dh2.iter_mut().zip(&cache.h2[t]) {
                *d *= 1.0 - h * h;
            }
            grads.w2.add_outer(&dh2, &cache.h1[t]);
            for (b, d) in grads.b2.iter_mut().zip(&dh2) {
                *b += d;
            }
            self.w2.tmatvec(&dh2, &mut dh1);
            for (d, h) in dh1.iter_mut().zip(&cache.h1[t]) {
                *d *= 1.0 - h * h;
            }
            grads.w1.add_outer(&dh1, &cache.inputs[t]);
            for (b, d) in grads.b1.iter_mut().zip(&dh1) {
                *b += d;
            }
        }
        Ok((loss, grads))
    }

    /// Write all parameters as a versioned text checkpoint that round-trips
    /// exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("wordstamp-checkpoint 1\n");
        out.push_str(&format!(
            "config {} {} {} {} {} {}\n",
            self.cfg.feature_dim,
            self.cfg.embed_dim,
            self.cfg.hypotheses,
            self.cfg.hidden.0,
            self.cfg.hidden.1,
            self.cfg.context
        ));
        out.push_str(&format!(
            "heads {} {} {}\n",
            fmt_f64(self.cfg.heads.offset_limit),
            fmt_f64(self.cfg.heads.duration_scale),
            fmt_f64(self.cfg.heads.frame_period)
        ));
        let tensors: [(&str, usize, usize, &[f64]); 6] = [
            ("w1", self.w1.rows, self.w1.cols, &self.w1.data),
            ("b1", 1, self.b1.len(), &self.b1),
            ("w2", self.w2.rows, self.w2.cols, &self.w2.data),
            ("b2", 1, self.b2.len(), &self.b2),
            ("w3", self.w3.rows, self.w3.cols, &self.w3.data),
            ("b3", 1, self.b3.len(), &self.b3),
        ];
        for (name, rows, cols, data) in tensors {
            out.push_str(&format!("tensor {name} {rows} {cols}\n"));
            for row in data.chunks(cols.max(1)) {
                let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        write_atomic(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = std::io::BufReader::new(file).lines().enumerate();
        let mut next_line = || -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(line))) => Ok((i + 1, line)),
                Some((i, Err(e))) => Err(Error::parse(i + 1, e.to_string())),
                None => Err(Error::invalid("checkpoint truncated")),
            }
        };

        let (_, header) = next_line()?;
        if header.trim() != "wordstamp-checkpoint 1" {
            return Err(Error::invalid(format!("unsupported checkpoint header {header:?}")));
        }
        let (ln, cfg_line) = next_line()?;
        let fields: Vec<&str> = cfg_line.split_whitespace().collect();
        if fields.len() != 7 || fields[0] != "config" {
            return Err(Error::parse(ln, "expected `config` line with 6 sizes"));
        }
        let sizes: Vec<usize> = fields[1..]
            .iter()
            .map(|s| parse_field(s, ln, "config size"))
            .collect::<Result<_>>()?;
        let (ln, head_line) = next_line()?;
        let hf: Vec<&str> = head_line.split_whitespace().collect();
        if hf.len() != 4 || hf[0] != "heads" {
            return Err(Error::parse(ln, "expected `heads` line with 3 values"));
        }
        let cfg = EncoderConfig {
            feature_dim: sizes[0],
            embed_dim: sizes[1],
            hypotheses: sizes[2],
            hidden: (sizes[3], sizes[4]),
            context: sizes[5],
            heads: HeadConfig {
                offset_limit: parse_field(hf[1], ln, "offset_limit")?,
                duration_scale: parse_field(hf[2], ln, "duration_scale")?,
                frame_period: parse_field(hf[3], ln, "frame_period")?,
            },
        };
        cfg.validate()?;

        let mut read_tensor = |name: &str| -> Result<(usize, usize, Vec<f64>)> {
            let (ln, head) = next_line()?;
            let parts: Vec<&str> = head.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tensor" || parts[1] != name {
                return Err(Error::parse(ln, format!("expected `tensor {name} rows cols`")));
            }
            let rows: usize = parse_field(parts[2], ln, "rows")?;
            let cols: usize = parse_field(parts[3], ln, "cols")?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, line) = next_line()?;
                let values: Vec<f64> = line
                    .split_whitespace()
                    .map(|v| parse_field(v, ln, name))
                    .collect::<Result<_>>()?;
                if values.len() != cols {
                    return Err(Error::parse(
                        ln,
                        format!("tensor {name}: expected {cols} values, got {}", values.len()),
                    ));
                }
                data.extend(values);
            }
            Ok((rows, cols, data))
        };

        let (r1, c1, d1) = read_tensor("w1")?;
        let (_, n1, bd1) = read_tensor("b1")?;
        let (r2, c2, d2) = read_tensor("w2")?;
        let (_, n2, bd2) = read_tensor("b2")?;
        let (r3, c3, d3) = read_tensor("w3")?;
        let (_, n3, bd3) = read_tensor("b3")?;
        let shapes_ok = r1 == cfg.hidden.0
            && c1 == cfg.input_width()
            && n1 == cfg.hidden.0
            && r2 == cfg.hidden.1
            && c2 == cfg.hidden.0
            && n2 == cfg.hidden.1
            && r3 == cfg.output_width()
            && c3 == cfg.hidden.1
            && n3 == cfg.output_width();
        if !shapes_ok {
            return Err(Error::invalid("checkpoint tensor shapes disagree with config"));
        }
        Ok(EncoderParams {
            cfg,
            w1: Matrix { rows: r1, cols: c1, data: d1 },
            b1: bd1,
            w2: Matrix { rows: r2, cols: c2, data: d2 },
            b2: bd2,
            w3: Matrix { rows: r3, cols: c3, data: d3 },
            b3: bd3,
        })
    }
}

/// Three-phase learning-rate schedule: linear warmup over the first `p1`
/// steps, inverse-square-root decay through step `p1 + p2`, then
/// exponential decay halving every `gamma_decay` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub p1: usize,
    pub p2: usize,
    pub gamma_decay: usize,
    /// Peak rate, reached exactly at step `p1`.
    pub peak: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { p1: 200, p2: 2000, gamma_decay: 2000, peak: 2.5e-3 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.p1 == 0 || self.p2 == 0 || self.gamma_decay == 0 || !(self.peak > 0.0) {
            return Err(Error::invalid("schedule phases and peak must be positive"));
        }
        Ok(())
    }

    /// Learning rate at 1-based step `s`.  The three branches agree
    /// exactly at both phase boundaries.
    pub fn lr_at(&self, s: usize) -> f64 {
        let p1 = self.p1 as f64;
        let knee = (self.p1 + self.p2) as f64;
        let sf = s as f64;
        if s <= self.p1 {
            self.peak * sf / p1
        } else if s <= self.p1 + self.p2 {
            self.peak * (p1 / sf).sqrt()
        } else {
            self.peak * (p1 / knee).sqrt() * 2f64.powf((knee - sf) / self.gamma_decay as f64)
        }
    }
}

/// Training settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of the corpus (taken from the end) held out for epoch
    /// selection.
    pub holdout_fraction: f64,
    /// Sampled timestamped-vocabulary size per utterance; clamped down
    /// when the base vocabulary cannot supply enough distinct negatives.
    pub sample_m: usize,
    /// Timestamp perturbation noise (seconds).
    pub sigma: f64,
    pub seed: u64,
    /// Decoder used for held-out word error rate.
    pub eval_decoder: DecoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 12,
            holdout_fraction: 0.1,
            sample_m: 200,
            sigma: sampler::DEFAULT_SIGMA,
            seed: 7,
            eval_decoder: DecoderConfig {
                input_beam: 8,
                word_beam: 8,
                ..DecoderConfig::default()
            },
        }
    }
}

/// Per-epoch aggregates recorded during training.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub holdout_loss: Option<f64>,
    pub holdout_wer: Option<f64>,
    pub lr_last: f64,
}

/// Result of [`train`]: the best parameters, the epoch they came from,
/// and the per-epoch record.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub best_epoch: usize,
    pub stats: Vec<EpochStats>,
}

// Derived per-utterance seed, stable across runs and thread schedules.
fn mix_seed(seed: u64, salt: u64, idx: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15) ^ idx.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

// The sampled vocabulary must hold the references, one perturbed copy
// each, and distinct negatives, so small base vocabularies cap it.
fn effective_sample_m(requested: usize, refs: &[usize], vocab_len: usize) -> usize {
    let mut distinct: Vec<usize> = refs.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let cap = 2 * refs.len() + (vocab_len - distinct.len());
    requested.min(cap)
}

struct UttRefs {
    words_1based: Vec<usize>,
    words_0based: Vec<usize>,
    stamps: Vec<Timestamp>,
}

fn utt_refs(utt: &Utterance, vocab: &EmbeddingMatrix) -> Result<UttRefs> {
    let words_1based = utt.word_labels(vocab)?;
    let words_0based: Vec<usize> = words_1based.iter().map(|w| w - 1).collect();
    Ok(UttRefs { words_1based, words_0based, stamps: utt.stamps.clone() })
}

fn sample_tvocab(
    refs: &UttRefs,
    vocab: &EmbeddingMatrix,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TimestampedVocab> {
    let pairs: Vec<(usize, Timestamp)> =
        refs.words_0based.iter().copied().zip(refs.stamps.iter().copied()).collect();
    let m = effective_sample_m(cfg.sample_m, &refs.words_0based, vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sampler::build_sample_vocab(&pairs, vocab, m, cfg.sigma, &mut rng)
}

fn holdout_wer(
    params: &EncoderParams,
    holdout: &[&Utterance],
    vocab: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<f64> {
    let lm = UniformLm::new(vocab.len());
    let per_utt: Vec<(usize, usize)> = holdout
        .par_iter()
        .map(|utt| -> Result<(usize, usize)> {
            let frames = params.encode(&utt.features)?;
            let (hyps, _) = decode(&frames, vocab, &lm, &cfg.eval_decoder)?;
            let hyp = hyps.first().map(|h| h.word_indices()).unwrap_or_default();
            let refs = utt_refs(utt, vocab)?.words_0based;
            let wer = metrics::wer(&refs, &hyp);
            Ok((wer.errors, wer.ref_len))
        })
        .collect::<Result<_>>()?;
    let (errors, len): (usize, usize) =
        per_utt.into_iter().fold((0, 0), |(e, l), (de, dl)| (e + de, l + dl));
    if len == 0 {
        return Ok(0.0);
    }
    Ok(errors as f64 / len as f64)
}

fn holdout_loss(
    params: &EncoderParams,
    holdout: &[(usize, &Utterance)],
    vocab: &EmbeddingMatrix,
    cfg: &TrainConfig,
) -> Result<f64> {
    if holdout.is_empty() {
        return Ok(0.0);
    }
    let losses: Vec<f64> = holdout
        .par_iter()
        .map(|&(idx, utt)| -> Result<f64> {
            let refs = utt_refs(utt, vocab)?;
            // A fixed per-utterance seed keeps the held-out objective
            // comparable across epochs.
            let tvocab = sample_tvocab(&refs, vocab, cfg, mix_seed(cfg.seed, u64::MAX, idx as u64))?;
            let frames = params.encode(&utt.features)?;
            let word_grid = ctc::word_grid(&frames, vocab)?;
            let word_loss = -ctc::log_posterior(&word_grid, &refs.words_1based)?;
            let labels = ctc::reference_labels(&tvocab, &refs.words_0based, &refs.stamps)?;
            let stamp_grid = ctc::stamp_grid(&frames, &tvocab)?;
            let stamp_loss = -ctc::log_posterior(&stamp_grid, &labels)?;
            Ok(word_loss + stamp_loss)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Train an encoder with plain SGD over the summed two-stream CTC loss.
///
/// The corpus tail (by `holdout_fraction`) is held out; after each epoch
/// the held-out word error rate is measured and the best epoch's
/// parameters are returned.  Batch gradients are evaluated in parallel
/// and reduced in a fixed order, so a given seed reproduces training
/// exactly.  A non-finite loss aborts with a diagnostic.
pub fn train(
    init: EncoderParams,
    corpus: &[Utterance],
    vocab: &EmbeddingMatrix,
    sched: &LrSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch size and epoch count must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::invalid("holdout fraction must lie in [0, 1)"));
    }
    sched.validate()?;
    cfg.eval_decoder.validate()?;

    let n_holdout = ((corpus.len() as f64 * cfg.holdout_fraction).round() as usize)
        .min(corpus.len() - 1);
    let split = corpus.len() - n_holdout;
    let (train_set, holdout_set) = corpus.split_at(split);
    let holdout_refs: Vec<&Utterance> = holdout_set.iter().collect();
    let holdout_indexed: Vec<(usize, &Utterance)> =
        holdout_set.iter().enumerate().map(|(i, u)| (split + i, u)).collect();

    let mut params = init;
    let mut best: Option<((f64, f64), usize, EncoderParams)> = None;
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xf1f1_f1f1_f1f1_f1f1, epoch as u64));
        // Fisher-Yates, seeded per epoch.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_items = 0usize;
        let mut lr_last = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = sched.lr_at(step);
            lr_last = lr;
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&idx| -> Result<(f64, Gradients)> {
                    let utt = &train_set[idx];
                    let refs = utt_refs(utt, vocab)?;
                    let tvocab = sample_tvocab(
                        &refs,
                        vocab,
                        cfg,
                        mix_seed(cfg.seed, epoch as u64, idx as u64),
                    )?;
                    let (loss, grads) = params.loss_and_gradient(
                        &utt.features,
                        vocab,
                        &tvocab,
                        &refs.words_1based,
                        &refs.stamps,
                    )?;
                    Ok((loss.total, grads))
                })
                .collect::<Result<_>>()?;
            let mut batch_loss = 0.0;
            let mut batch_grads = Gradients::zeros(&params.cfg);
            for (loss, grads) in &results {
                batch_loss += loss;
                batch_grads.add(grads);
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            batch_grads.scale(scale);
            if !batch_loss.is_finite() {
                return Err(Error::invalid(format!(
                    "training diverged: non-finite loss at step {step} (epoch {epoch})"
                )));
            }
            params.step(&batch_grads, lr);
            epoch_loss += batch_loss * batch.len() as f64;
            epoch_items += batch.len();
        }
        let train_loss = epoch_loss / epoch_items.max(1) as f64;

        let (h_loss, h_wer) = if holdout_refs.is_empty() {
            (None, None)
        } else {
            (
                Some(holdout_loss(&params, &holdout_indexed, vocab, cfg)?),
                Some(holdout_wer(&params, &holdout_refs, vocab, cfg)?),
            )
        };
        stats.push(EpochStats {
            epoch,
            steps: step,
            train_loss,
            holdout_loss: h_loss,
            holdout_wer: h_wer,
            lr_last,
        });
        // Epoch selection: held-out WER when available, training loss
        // otherwise.  WER plateaus while the timestamp heads keep
        // polishing, so equal WER is broken by held-out loss and then by
        // preferring the later epoch.
        let score = (h_wer.unwrap_or(train_loss), h_loss.unwrap_or(train_loss));
        if best.as_ref().is_none_or(|(b, _, _)| score <= *b) {
            best = Some((score, epoch, params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { params: best_params, best_epoch, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_corpus, gen_embeddings, GenSpec};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            feature_dim: 2,
            embed_dim: 2,
            hypotheses: 2,
            hidden: (4, 4),
            context: 2,
            heads: HeadConfig::default(),
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Vec<Vec<f64>> {
        (0..t).map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn small_vocab(dim: usize, n: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = EmbeddingMatrix::new(dim).unwrap();
        for i in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            m.push(format!("w{i}"), v).unwrap();
        }
        m
    }

    #[test]
    fn zero_parameters_give_exact_head_centers() {
        let cfg = tiny_cfg();
        let mut params = EncoderParams::init(cfg, 1).unwrap();
        for i in 0..params.num_params() {
            params.set_param(i, 0.0);
        }
        let frames = params.encode(&[vec![0.3, -0.2], vec![0.1, 0.9]]).unwrap();
        for (t, frame) in frames.iter().enumerate() {
            for stamp in &frame.stamps {
                assert_eq!(stamp.start, t as f64 * 0.040, "tanh(0) pins tau to the frame time");
                assert_eq!(stamp.duration, 1.0, "sigmoid(0) halves the 2s duration scale");
            }
        }
    }

    #[test]
    fn head_bounds_hold_for_any_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let mut params = EncoderParams::init(tiny_cfg(), trial).unwrap();
            // Exaggerate the parameters to push the heads to extremes.
            for i in 0..params.num_params() {
                params.set_param(i, params.get_param(i) * rng.random_range(0.0..200.0));
            }
            let features = random_features(&mut rng, 6, 2);
            for (t, frame) in params.encode(&features).unwrap().iter().enumerate() {
                for stamp in &frame.stamps {
                    // Strict in exact arithmetic; saturated tanh/sigmoid
                    // round onto the closed interval in f64.
                    assert!((stamp.start - t as f64 * 0.040).abs() <= 1.0);
                    assert!(stamp.duration >= 0.0 && stamp.duration <= 2.0);
                }
            }
        }
    }

    #[test]
    fn encode_rejects_wrong_feature_width() {
        let params = EncoderParams::init(tiny_cfg(), 3).unwrap();
        let err = params.encode(&[vec![1.0, 2.0, 3.0]]).unwrap_err().to_string();
        assert!(err.contains("expected 2"), "{err}");
        assert!(params.encode(&[]).is_err());
    }

    fn grad_check(hypotheses: usize, seed: u64) -> f64 {
        let cfg = EncoderConfig { hypotheses, ..tiny_cfg() };
        let params = EncoderParams::init(cfg, seed).unwrap();
        assert!(params.num_params() <= 500, "tiny model contract");
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let features = random_features(&mut rng, 4, 2);
        let vocab = small_vocab(2, 4, seed + 200);
        let words = vec![1usize, 2];
        let stamps =
            vec![Timestamp { start: 0.04, duration: 0.08 }, Timestamp { start: 0.12, duration: 0.04 }];
        let pairs: Vec<(usize, Timestamp)> = vec![(0, stamps[0]), (1, stamps[1])];
        let mut svocab_rng = ChaCha8Rng::seed_from_u64(seed + 300);
        let tvocab = sampler::build_sample_vocab(&pairs, &vocab, 6, 0.08, &mut svocab_rng).unwrap();

        let (_, grads) =
            params.loss_and_gradient(&features, &vocab, &tvocab, &words, &stamps).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..params.num_params() {
            let mut plus = params.clone();
            plus.set_param(i, plus.get_param(i) + h);
            let (lp, _) =
                plus.loss_and_gradient(&features, &vocab, &tvocab, &words, &stamps).unwrap();
            let mut minus = params.clone();
            minus.set_param(i, minus.get_param(i) - h);
            let (lm, _) =
                minus.loss_and_gradient(&features, &vocab, &tvocab, &words, &stamps).unwrap();
            let fd = (lp.total - lm.total) / (2.0 * h);
            let an = EncoderParams::grad_param(&grads, i);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn analytic_gradient_matches_finite_differences_single_hypothesis() {
        let worst = grad_check(1, 11);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn analytic_gradient_matches_finite_differences_multi_hypothesis() {
        let worst = grad_check(2, 17);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn one_small_step_decreases_one_sample_loss() {
        let cfg = tiny_cfg();
        let mut params = EncoderParams::init(cfg, 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let features = random_features(&mut rng, 5, 2);
        let vocab = small_vocab(2, 4, 25);
        let words = vec![3usize, 1];
        let stamps =
            vec![Timestamp { start: 0.05, duration: 0.1 }, Timestamp { start: 0.15, duration: 0.1 }];
        let pairs: Vec<(usize, Timestamp)> = vec![(2, stamps[0]), (0, stamps[1])];
        let mut svocab_rng = ChaCha8Rng::seed_from_u64(26);
        let tvocab = sampler::build_sample_vocab(&pairs, &vocab, 6, 0.08, &mut svocab_rng).unwrap();

        let (before, grads) =
            params.loss_and_gradient(&features, &vocab, &tvocab, &words, &stamps).unwrap();
        params.step(&grads, 1e-4);
        let (after, _) =
            params.loss_and_gradient(&features, &vocab, &tvocab, &words, &stamps).unwrap();
        assert!(
            after.total < before.total,
            "descent step should reduce loss: {} -> {}",
            before.total,
            after.total
        );
    }

    #[test]
    fn schedule_brackets_agree_at_both_joints() {
        let sched = LrSchedule { p1: 30000, p2: 270000, gamma_decay: 30000, peak: 0.01 / 272f64.sqrt() };
        // Warmup and inverse-sqrt branches both give the peak at p1.
        let at_p1 = sched.lr_at(sched.p1);
        assert_eq!(at_p1, sched.peak);
        assert!((at_p1 - 6.0634e-4).abs() < 1e-7);
        let mid_formula = sched.peak * (sched.p1 as f64 / sched.p1 as f64).sqrt();
        assert_eq!(at_p1, mid_formula);
        // Inverse-sqrt and exponential branches agree at the knee.
        let knee = sched.p1 + sched.p2;
        let from_mid = sched.peak * (sched.p1 as f64 / knee as f64).sqrt();
        assert_eq!(sched.lr_at(knee), from_mid);
        assert!((sched.lr_at(knee + 1) - from_mid).abs() / from_mid < 1e-4, "no jump past knee");
        // The decay phase halves the rate every gamma_decay steps.
        let a = sched.lr_at(knee + sched.gamma_decay);
        let b = sched.lr_at(knee + 2 * sched.gamma_decay);
        assert!((a / sched.lr_at(knee) - 0.5).abs() < 1e-12);
        assert!((b / a - 0.5).abs() < 1e-12);
        // Positive everywhere.
        for s in [1, 10, sched.p1, knee, knee + 100_000] {
            assert!(sched.lr_at(s) > 0.0);
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let params = EncoderParams::init(tiny_cfg(), 31).unwrap();
        params.save(&path).unwrap();
        let loaded = EncoderParams::load(&path).unwrap();
        assert_eq!(params, loaded);
        // Same outputs on the same features.
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let features = random_features(&mut rng, 3, 2);
        let a = params.encode(&features).unwrap();
        let b = loaded.encode(&features).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.embeddings, fb.embeddings);
            assert_eq!(fa.blank, fb.blank);
        }

        // Corrupted header is rejected.
        std::fs::write(&path, "not-a-checkpoint\n").unwrap();
        assert!(EncoderParams::load(&path).is_err());
    }

    #[test]
    fn training_smoke_runs_and_records_epochs() {
        let spec = GenSpec {
            vocab_size: 8,
            dim: 4,
            words_min: 2,
            words_max: 3,
            frames_min: 2,
            frames_max: 3,
            gap_min: 1,
            gap_max: 2,
            ..GenSpec::default()
        };
        let vocab = gen_embeddings(&spec, &mut ChaCha8Rng::seed_from_u64(41)).unwrap();
        let corpus = gen_corpus(&spec, &vocab, 24, 42).unwrap();
        let enc_cfg = EncoderConfig {
            feature_dim: 4,
            embed_dim: 4,
            hypotheses: 1,
            hidden: (16, 16),
            context: 2,
            heads: HeadConfig::default(),
        };
        let params = EncoderParams::init(enc_cfg, 43).unwrap();
        let sched = LrSchedule { p1: 4, p2: 40, gamma_decay: 40, peak: 5e-3 };
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 3,
            holdout_fraction: 0.25,
            sample_m: 12,
            ..TrainConfig::default()
        };
        let out = train(params, &corpus, &vocab, &sched, &cfg).unwrap();
        assert_eq!(out.stats.len(), 3);
        assert!(out.stats.iter().all(|s| s.train_loss.is_finite()));
        assert!(out.stats.iter().all(|s| s.holdout_wer.is_some()));
        assert!(out.best_epoch >= 1 && out.best_epoch <= 3);
        // Loss should drop over the smoke run.
        assert!(
            out.stats.last().unwrap().train_loss < out.stats[0].train_loss,
            "{:?}",
            out.stats.iter().map(|s| s.train_loss).collect::<Vec<_>>()
        );

        // Determinism: the same seeds give bitwise-identical parameters.
        let params_a = EncoderParams::init(
            EncoderConfig {
                feature_dim: 4,
                embed_dim: 4,
                hypotheses: 1,
                hidden: (16, 16),
                context: 2,
                heads: HeadConfig::default(),
            },
            43,
        )
        .unwrap();
        let out_b = train(params_a, &corpus, &vocab, &sched, &cfg).unwrap();
        assert_eq!(out.params, out_b.params);
    }
}
