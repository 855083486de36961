//! Command-line front end: generate synthetic corpora, train encoders,
//! decode, force-align, score hypotheses, and run the numerics
//! verification suite.  Every command is deterministic given its seed;
//! all artifacts are plain text and written atomically.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use wordstamp::config::Settings;
use wordstamp::corpus::{gen_corpus, gen_embeddings, read_corpus, write_corpus, GenSpec, Utterance};
use wordstamp::decoder::{decode, forced_align, DecoderConfig, WordHyp};
use wordstamp::lab;
use wordstamp::lattice::lattice_to_cn;
use wordstamp::lm::{BigramLm, Lm, UniformLm};
use wordstamp::metrics::{align, histogram, segmentation_mae, AlignOp};
use wordstamp::model::{EncoderConfig, EncoderParams, LrSchedule, TrainConfig};
use wordstamp::scoring::EmbeddingMatrix;
use wordstamp::textio::write_atomic;

#[derive(Parser)]
#[command(
    name = "wordstamp",
    version,
    about = "Timestamped acoustic-to-word recognition on synthetic corpora"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus and its word-embedding matrix.
    Gen {
        /// Generator settings file (flat key-value; defaults when omitted).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Corpus output path; embeddings go to the same path with a
        /// `.vocab` extension.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Number of utterances (overrides the `count` key).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train an encoder on a corpus and write the best checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Training settings file (flat key-value; defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path; per-epoch metrics go to the same path
        /// with a `.metrics.csv` extension.
        #[arg(long)]
        out: PathBuf,
        /// Embedding matrix (defaults to the corpus path with `.vocab`).
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Overrides the `seed` key.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode a corpus: 1-best hypotheses, lattices, confusion networks.
    Decode {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Decoder settings file (flat key-value; defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Embedding matrix (defaults to the corpus path with `.vocab`).
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Force-align each utterance against its reference transcript.
    Align {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory for `alignments.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Embedding matrix (defaults to the corpus path with `.vocab`).
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Optional decoder settings file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a hypothesis directory against a reference corpus.
    Eval {
        /// Reference corpus.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory holding `hyps.txt` and/or `alignments.csv`.
        #[arg(long)]
        hyp: PathBuf,
        /// Output directory for the report and error histograms.
        #[arg(long)]
        out: PathBuf,
        /// Entity words (comma or space separated) for the entity error
        /// rate.
        #[arg(long)]
        entities: Option<String>,
    },
    /// Run the scoring-geometry verification suite.
    Verify {
        /// Output directory for the check report and CSV tables.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Gen { spec, out, seed, count } => cmd_gen(spec.as_deref(), &out, seed, count),
        Cmd::Train { corpus, config, out, vocab, seed } => {
            cmd_train(&corpus, config.as_deref(), &out, vocab.as_deref(), seed)
        }
        Cmd::Decode { corpus, checkpoint, config, out, vocab } => {
            cmd_decode(&corpus, &checkpoint, config.as_deref(), &out, vocab.as_deref())
        }
        Cmd::Align { corpus, checkpoint, out, vocab, config } => {
            cmd_align(&corpus, &checkpoint, &out, vocab.as_deref(), config.as_deref())
        }
        Cmd::Eval { reference, hyp, out, entities } => {
            cmd_eval(&reference, &hyp, &out, entities.as_deref())
        }
        Cmd::Verify { out } => cmd_verify(&out),
    }
}

/// Where the embedding matrix lives for a corpus path.
fn vocab_sibling(corpus: &Path) -> PathBuf {
    corpus.with_extension("vocab")
}

fn load_settings(path: Option<&Path>) -> Result<Settings> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading settings file {}", p.display()))?;
            Settings::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(Settings::default()),
    }
}

fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let utts =
        read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if utts.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(utts)
}

fn load_vocab(corpus: &Path, explicit: Option<&Path>) -> Result<EmbeddingMatrix> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| vocab_sibling(corpus));
    EmbeddingMatrix::load(&path)
        .with_context(|| format!("reading embedding matrix {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<EncoderParams> {
    EncoderParams::load(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))
}

/// 0-based vocabulary indices of the reference transcript.
fn reference_indices(utt: &Utterance, vocab: &EmbeddingMatrix) -> Result<Vec<usize>> {
    utt.words
        .iter()
        .map(|w| {
            vocab.index_of(w).ok_or_else(|| {
                anyhow!("utterance {}: word {:?} not in the vocabulary", utt.id, w)
            })
        })
        .collect()
}

/// Map entity word strings to vocabulary indices.
fn entity_indices(words: &[String], vocab: &EmbeddingMatrix) -> Result<HashSet<usize>> {
    words
        .iter()
        .map(|w| {
            vocab
                .index_of(w)
                .ok_or_else(|| anyhow!("entity word {w:?} not in the vocabulary"))
        })
        .collect()
}

/// Build the decoding LM from settings: `lm` is `uniform` (default) or
/// `bigram` (trained on the corpus transcripts), `entity_words` lists
/// class-boosted words.
fn build_lm(
    settings: &mut Settings,
    corpus: &[Utterance],
    vocab: &EmbeddingMatrix,
) -> Result<Box<dyn Lm>> {
    let entities = match settings.get_list("entity_words") {
        Some(words) => entity_indices(&words, vocab)?,
        None => HashSet::new(),
    };
    let kind = settings.get::<String>("lm")?.unwrap_or_else(|| "uniform".into());
    match kind.as_str() {
        "uniform" => Ok(Box::new(UniformLm::new(vocab.len()).with_entities(entities))),
        "bigram" => {
            let transcripts: Vec<Vec<usize>> = corpus
                .iter()
                .map(|u| reference_indices(u, vocab))
                .collect::<Result<_>>()?;
            Ok(Box::new(BigramLm::train(&transcripts, vocab.len()).with_entities(entities)))
        }
        other => bail!("unknown lm kind {other:?} (expected uniform or bigram)"),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.6}"),
        _ => "nan".into(),
    }
}

fn cmd_gen(spec_path: Option<&Path>, out: &Path, seed: u64, count: Option<usize>) -> Result<i32> {
    let mut settings = load_settings(spec_path)?;
    if let Some(c) = count {
        settings.set("count", c.to_string());
    }
    let count = settings.get::<usize>("count")?.unwrap_or(200);
    let mut spec = GenSpec::default();
    settings.apply_gen(&mut spec)?;
    settings.reject_unused()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = gen_embeddings(&spec, &mut rng)?;
    let utts = gen_corpus(&spec, &vocab, count, seed)?;
    write_corpus(out, &utts)?;
    let vocab_path = vocab_sibling(out);
    vocab.save(&vocab_path)?;
    println!(
        "wrote {} utterances to {} ({} words, dim {})",
        utts.len(),
        out.display(),
        vocab.len(),
        vocab.dim()
    );
    println!("wrote embedding matrix to {}", vocab_path.display());
    Ok(0)
}

fn cmd_train(
    corpus_path: &Path,
    config: Option<&Path>,
    out: &Path,
    vocab_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<i32> {
    let corpus = load_corpus(corpus_path)?;
    let vocab = load_vocab(corpus_path, vocab_path)?;
    let feature_dim = corpus[0]
        .features
        .first()
        .map(Vec::len)
        .ok_or_else(|| anyhow!("utterance {} has no frames", corpus[0].id))?;

    let mut settings = load_settings(config)?;
    let mut train_cfg = TrainConfig::default();
    settings.apply_train(&mut train_cfg)?;
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let mut sched = LrSchedule::default();
    settings.apply_schedule(&mut sched)?;
    let mut enc = EncoderConfig {
        feature_dim,
        embed_dim: vocab.dim(),
        ..EncoderConfig::default()
    };
    settings.apply_encoder(&mut enc)?;
    settings.apply_decoder(&mut train_cfg.eval_decoder)?;
    settings.reject_unused()?;
    if enc.feature_dim != feature_dim {
        bail!("feature_dim {} does not match the corpus features ({feature_dim})", enc.feature_dim);
    }
    if enc.embed_dim != vocab.dim() {
        bail!("embed_dim {} does not match the embedding matrix ({})", enc.embed_dim, vocab.dim());
    }

    let init = EncoderParams::init(enc, train_cfg.seed)?;
    let outcome = wordstamp::model::train(init, &corpus, &vocab, &sched, &train_cfg)?;

    outcome.params.save(out)?;
    let mut csv = String::from("epoch,steps,train_loss,holdout_loss,holdout_wer,lr_last,best\n");
    for s in &outcome.stats {
        csv.push_str(&format!(
            "{},{},{:.6},{},{},{:.6e},{}\n",
            s.epoch,
            s.steps,
            s.train_loss,
            fmt_opt(s.holdout_loss),
            fmt_opt(s.holdout_wer),
            s.lr_last,
            (s.epoch == outcome.best_epoch) as u8
        ));
    }
    let metrics_path = out.with_extension("metrics.csv");
    write_atomic(&metrics_path, &csv)?;

    for s in &outcome.stats {
        println!(
            "epoch {:>3}: train loss {:.4}, holdout loss {}, holdout wer {}",
            s.epoch,
            s.train_loss,
            fmt_opt(s.holdout_loss),
            fmt_opt(s.holdout_wer),
        );
    }
    println!("kept epoch {} -> {}", outcome.best_epoch, out.display());
    println!("wrote per-epoch metrics to {}", metrics_path.display());
    Ok(0)
}

/// One hypothesis line: tab-separated id and `word:start:duration` tokens
/// (times in seconds).
fn hyp_line(id: &str, words: &[WordHyp], vocab: &EmbeddingMatrix) -> String {
    let tokens: Vec<String> = words
        .iter()
        .map(|w| format!("{}:{:.6}:{:.6}", vocab.id(w.word), w.stamp.start, w.stamp.duration))
        .collect();
    format!("{id}\t{}", tokens.join(" "))
}

fn cmd_decode(
    corpus_path: &Path,
    checkpoint: &Path,
    config: Option<&Path>,
    out: &Path,
    vocab_path: Option<&Path>,
) -> Result<i32> {
    let corpus = load_corpus(corpus_path)?;
    let vocab = load_vocab(corpus_path, vocab_path)?;
    let params = load_checkpoint(checkpoint)?;

    let mut settings = load_settings(config)?;
    let mut cfg = DecoderConfig::default();
    settings.apply_decoder(&mut cfg)?;
    let lm = build_lm(&mut settings, &corpus, &vocab)?;
    settings.reject_unused()?;

    fs::create_dir_all(out.join("lattices"))?;
    fs::create_dir_all(out.join("cns"))?;

    let results: Vec<(String, String, String)> = corpus
        .par_iter()
        .map(|utt| -> Result<_> {
            let frames = params.encode(&utt.features)?;
            let (hyps, lat) = decode(&frames, &vocab, lm.as_ref(), &cfg)?;
            let best = hyps.first().map(|h| h.words.as_slice()).unwrap_or(&[]);
            let cn = lattice_to_cn(&lat)?;
            Ok((hyp_line(&utt.id, best, &vocab), lat.to_text(), cn.to_text()))
        })
        .collect::<Result<_>>()?;

    let mut hyps = String::new();
    for ((line, lat_text, cn_text), utt) in results.iter().zip(&corpus) {
        hyps.push_str(line);
        hyps.push('\n');
        write_atomic(&out.join("lattices").join(format!("{}.lat", utt.id)), lat_text)?;
        write_atomic(&out.join("cns").join(format!("{}.cn", utt.id)), cn_text)?;
    }
    write_atomic(&out.join("hyps.txt"), &hyps)?;
    println!("decoded {} utterances into {}", corpus.len(), out.display());
    Ok(0)
}

fn cmd_align(
    corpus_path: &Path,
    checkpoint: &Path,
    out: &Path,
    vocab_path: Option<&Path>,
    config: Option<&Path>,
) -> Result<i32> {
    let corpus = load_corpus(corpus_path)?;
    let vocab = load_vocab(corpus_path, vocab_path)?;
    let params = load_checkpoint(checkpoint)?;
    let mut settings = load_settings(config)?;
    // With the word sequence fixed there are no insertions for the overlap
    // gate to suppress; it would only rule out feasible paths.
    let mut cfg = DecoderConfig { overlap_gamma: f64::INFINITY, ..DecoderConfig::default() };
    settings.apply_decoder(&mut cfg)?;
    settings.reject_unused()?;
    let lm = UniformLm::new(vocab.len());

    let rows: Vec<(String, bool)> = corpus
        .par_iter()
        .map(|utt| -> Result<_> {
            let refs = reference_indices(utt, &vocab)?;
            let frames = params.encode(&utt.features)?;
            let alignment = forced_align(&frames, &vocab, &refs, &lm, &cfg)?;
            let mut text = String::new();
            for (i, (&w, stamp)) in refs.iter().zip(&utt.stamps).enumerate() {
                let hyp = alignment.feasible.then(|| &alignment.words[i].stamp);
                text.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{},{},{}\n",
                    utt.id,
                    i,
                    vocab.id(w),
                    stamp.start,
                    stamp.duration,
                    fmt_opt(hyp.map(|s| s.start)),
                    fmt_opt(hyp.map(|s| s.duration)),
                    alignment.feasible as u8
                ));
            }
            Ok((text, alignment.feasible))
        })
        .collect::<Result<_>>()?;

    let mut csv =
        String::from("id,index,word,ref_start,ref_duration,start,duration,feasible\n");
    for (text, _) in &rows {
        csv.push_str(text);
    }
    fs::create_dir_all(out)?;
    write_atomic(&out.join("alignments.csv"), &csv)?;
    let infeasible = rows.iter().filter(|(_, ok)| !ok).count();
    println!(
        "aligned {} utterances into {} ({} infeasible)",
        corpus.len(),
        out.display(),
        infeasible
    );
    Ok(0)
}

/// A parsed hypothesis transcript: word strings plus (start, duration).
struct HypUtt {
    words: Vec<String>,
    stamps: Vec<(f64, f64)>,
}

fn parse_hyps(text: &str) -> Result<Vec<(String, HypUtt)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| anyhow!("hyps.txt line {}: missing tab after id", idx + 1))?;
        let mut words = Vec::new();
        let mut stamps = Vec::new();
        for token in rest.split_whitespace() {
            let mut parts = token.rsplitn(3, ':');
            let dur = parts.next();
            let start = parts.next();
            let word = parts.next();
            let (Some(word), Some(start), Some(dur)) = (word, start, dur) else {
                bail!("hyps.txt line {}: token {token:?} is not word:start:duration", idx + 1);
            };
            let start: f64 = start
                .parse()
                .map_err(|_| anyhow!("hyps.txt line {}: bad start in {token:?}", idx + 1))?;
            let dur: f64 = dur
                .parse()
                .map_err(|_| anyhow!("hyps.txt line {}: bad duration in {token:?}", idx + 1))?;
            words.push(word.to_string());
            stamps.push((start, dur));
        }
        out.push((id.to_string(), HypUtt { words, stamps }));
    }
    Ok(out)
}

/// Timestamp pairs read back from `alignments.csv` (feasible rows only).
fn parse_alignment_pairs(text: &str) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>)> {
    let mut hyp = Vec::new();
    let mut reference = Vec::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            bail!("alignments.csv line {}: expected 8 columns", idx + 1);
        }
        if cols[7] != "1" {
            continue;
        }
        let field = |i: usize| -> Result<f64> {
            cols[i]
                .parse()
                .map_err(|_| anyhow!("alignments.csv line {}: bad number {:?}", idx + 1, cols[i]))
        };
        reference.push((field(3)?, field(4)?));
        hyp.push((field(5)?, field(6)?));
    }
    Ok((hyp, reference))
}

fn cmd_eval(
    reference: &Path,
    hyp_dir: &Path,
    out: &Path,
    entities: Option<&str>,
) -> Result<i32> {
    let ref_utts = load_corpus(reference)?;
    let by_id: HashMap<&str, &Utterance> =
        ref_utts.iter().map(|u| (u.id.as_str(), u)).collect();
    let entity_words: HashSet<String> = entities
        .map(|e| e.split([',', ' ']).filter(|w| !w.is_empty()).map(str::to_string).collect())
        .unwrap_or_default();

    let hyps_path = hyp_dir.join("hyps.txt");
    let align_path = hyp_dir.join("alignments.csv");
    if !hyps_path.exists() && !align_path.exists() {
        bail!(
            "{} holds neither hyps.txt nor alignments.csv; nothing to score",
            hyp_dir.display()
        );
    }

    // Word error counts from the 1-best transcripts.
    let mut scored = 0usize;
    let mut ref_words = 0usize;
    let (mut subs, mut dels, mut ins) = (0usize, 0usize, 0usize);
    let mut entity_errors = 0usize;
    let mut entity_tokens = 0usize;
    let mut matched_hyp: Vec<(f64, f64)> = Vec::new();
    let mut matched_ref: Vec<(f64, f64)> = Vec::new();
    if hyps_path.exists() {
        let text = fs::read_to_string(&hyps_path)
            .with_context(|| format!("reading {}", hyps_path.display()))?;
        let mut seen = HashSet::new();
        for (id, hyp) in parse_hyps(&text)? {
            let utt = *by_id
                .get(id.as_str())
                .ok_or_else(|| anyhow!("hyps.txt references unknown utterance {id:?}"))?;
            seen.insert(id);
            scored += 1;
            ref_words += utt.words.len();
            let mask: Vec<bool> =
                utt.words.iter().map(|w| entity_words.contains(w)).collect();
            entity_tokens += mask.iter().filter(|&&e| e).count();
            let (mut i, mut j) = (0usize, 0usize);
            for op in align(&utt.words, &hyp.words) {
                match op {
                    AlignOp::Match => {
                        matched_ref.push((utt.stamps[i].start, utt.stamps[i].duration));
                        matched_hyp.push(hyp.stamps[j]);
                        i += 1;
                        j += 1;
                    }
                    AlignOp::Substitute => {
                        subs += 1;
                        entity_errors += mask[i] as usize;
                        i += 1;
                        j += 1;
                    }
                    AlignOp::Delete => {
                        dels += 1;
                        entity_errors += mask[i] as usize;
                        i += 1;
                    }
                    AlignOp::Insert => {
                        let inside = i > 0 && mask[i - 1] && i < mask.len() && mask[i];
                        entity_errors += inside as usize;
                        ins += 1;
                        j += 1;
                    }
                }
            }
        }
        // Reference utterances without a hypothesis line count as deleted.
        for utt in &ref_utts {
            if !seen.contains(utt.id.as_str()) {
                scored += 1;
                ref_words += utt.words.len();
                dels += utt.words.len();
                entity_errors +=
                    utt.words.iter().filter(|w| entity_words.contains(*w)).count();
                entity_tokens +=
                    utt.words.iter().filter(|w| entity_words.contains(*w)).count();
            }
        }
    }

    // Timestamp accuracy: prefer forced alignments (positionally exact),
    // fall back to matched decode words.
    let (mae_pairs_hyp, mae_pairs_ref, mae_source) = if align_path.exists() {
        let text = fs::read_to_string(&align_path)
            .with_context(|| format!("reading {}", align_path.display()))?;
        let (h, r) = parse_alignment_pairs(&text)?;
        (h, r, "alignments")
    } else {
        (matched_hyp, matched_ref, "matched decode words")
    };
    let (mu_alpha, mu_beta) = if mae_pairs_hyp.is_empty() {
        (None, None)
    } else {
        let (a, b) = segmentation_mae(&mae_pairs_hyp, &mae_pairs_ref)?;
        (Some(a), Some(b))
    };

    let errors = subs + dels + ins;
    let wer = (ref_words > 0).then(|| errors as f64 / ref_words as f64);
    let neer = (entity_tokens > 0).then(|| entity_errors as f64 / entity_tokens as f64);

    fs::create_dir_all(out)?;
    let mut report = String::from(
        "utterances,ref_words,wer,substitutions,deletions,insertions,neer,entity_tokens,\
         mu_alpha,mu_beta,timestamp_pairs\n",
    );
    report.push_str(&format!(
        "{scored},{ref_words},{},{subs},{dels},{ins},{},{entity_tokens},{},{},{}\n",
        fmt_opt(wer),
        fmt_opt(neer),
        fmt_opt(mu_alpha),
        fmt_opt(mu_beta),
        mae_pairs_hyp.len()
    ));
    write_atomic(&out.join("report.csv"), &report)?;

    // Signed error histograms in milliseconds, 10 ms bins.
    for (name, pick) in
        [("offset_hist.csv", 0usize), ("duration_hist.csv", 1usize)]
    {
        let errs: Vec<f64> = mae_pairs_hyp
            .iter()
            .zip(&mae_pairs_ref)
            .map(|(h, r)| {
                1000.0 * if pick == 0 { h.0 - r.0 } else { h.1 - r.1 }
            })
            .collect();
        let csv = if errs.is_empty() {
            String::from("bin_start,bin_end,count\n")
        } else {
            histogram(&errs, 10.0)?.to_csv()
        };
        write_atomic(&out.join(name), &csv)?;
    }

    println!(
        "scored {scored} utterances, {ref_words} reference words: wer {}, neer {}, \
         mu_alpha {} ms, mu_beta {} ms ({} timestamp pairs from {mae_source})",
        fmt_opt(wer),
        fmt_opt(neer),
        fmt_opt(mu_alpha),
        fmt_opt(mu_beta),
        mae_pairs_hyp.len()
    );
    println!("wrote report to {}", out.join("report.csv").display());
    Ok(0)
}

fn cmd_verify(out: &Path) -> Result<i32> {
    fs::create_dir_all(out)?;
    let report = lab::run_all(out)?;
    let mut text = String::new();
    for check in &report.checks {
        let line = format!(
            "[{}] {}: {}",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.detail
        );
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(&out.join("report.txt"), &text)?;
    if report.all_pass() {
        println!("all {} checks passed; tables in {}", report.checks.len(), out.display());
        Ok(0)
    } else {
        eprintln!("verification failed");
        Ok(1)
    }
}
