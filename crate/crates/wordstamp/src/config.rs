//! Flat key-value run configuration.
//!
//! One setting per line as `key value` (an optional `=` between them is
//! accepted), `#` starts a comment, blank lines are skipped, and a key
//! given twice keeps its last value so command-line overrides can simply
//! be appended.  Keys mirror the field names of the structs they set; a
//! single file may configure several structs, so consumption is tracked
//! and [`Settings::unused`] exposes leftovers for the caller to reject.

use std::collections::HashSet;

use crate::decoder::DecoderConfig;
use crate::model::{EncoderConfig, LrSchedule, TrainConfig};
use crate::corpus::GenSpec;
use crate::textio::parse_field;
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    /// 1-based source line; 0 marks a command-line override.
    line: usize,
}

/// Parsed configuration entries plus a record of which keys have been
/// consumed by `apply_*`/`get` calls.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    entries: Vec<Entry>,
    used: HashSet<String>,
}

impl Settings {
    /// Parse configuration text.  Fails on a non-comment line that has a
    /// key but no value.
    pub fn parse(text: &str) -> Result<Settings> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, rest) = match content.split_once(char::is_whitespace) {
                Some((k, r)) => (k, r),
                None => match content.split_once('=') {
                    Some((k, r)) => (k.trim(), r),
                    None => {
                        return Err(Error::parse(
                            line,
                            format!("key `{content}` has no value"),
                        ));
                    }
                },
            };
            let value = rest.trim().trim_start_matches('=').trim();
            if value.is_empty() {
                return Err(Error::parse(line, format!("key `{key}` has no value")));
            }
            entries.push(Entry { key: key.to_string(), value: value.to_string(), line });
        }
        Ok(Settings { entries, used: HashSet::new() })
    }

    /// Append an override; it wins over any earlier value for `key`.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push(Entry { key: key.into(), value: value.into(), line: 0 });
    }

    fn latest(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    /// Fetch and parse the latest value for `key`, marking it consumed.
    pub fn get<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(entry) = self.latest(key) else {
            return Ok(None);
        };
        let (value, line) = (entry.value.clone(), entry.line);
        self.used.insert(key.to_string());
        if line > 0 {
            return parse_field(&value, line, key).map(Some);
        }
        value
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid(format!("{key}: cannot parse `{value}`")))
    }

    /// Fetch the latest value for `key` split on whitespace.
    pub fn get_list(&mut self, key: &str) -> Option<Vec<String>> {
        let entry = self.latest(key)?;
        let words = entry.value.split_whitespace().map(str::to_string).collect();
        self.used.insert(key.to_string());
        Some(words)
    }

    /// Keys never consumed, with the line of their last occurrence.
    pub fn unused(&self) -> Vec<(String, usize)> {
        let mut seen = HashSet::new();
        let mut leftovers = Vec::new();
        for entry in self.entries.iter().rev() {
            if !self.used.contains(&entry.key) && seen.insert(entry.key.clone()) {
                leftovers.push((entry.key.clone(), entry.line));
            }
        }
        leftovers.reverse();
        leftovers
    }

    /// Error if any key was never consumed by an `apply_*`/`get` call.
    pub fn reject_unused(&self) -> Result<()> {
        let leftovers = self.unused();
        if leftovers.is_empty() {
            return Ok(());
        }
        let list = leftovers
            .iter()
            .map(|(k, line)| {
                if *line > 0 {
                    format!("`{k}` (line {line})")
                } else {
                    format!("`{k}`")
                }
            })
            .collect::<Vec<_>>()
            .join(", ");
        Err(Error::invalid(format!("unrecognized configuration keys: {list}")))
    }

    fn take<T: std::str::FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Overlay corpus-generation keys onto `spec` and validate it.
    pub fn apply_gen(&mut self, spec: &mut GenSpec) -> Result<()> {
        self.take("vocab_size", &mut spec.vocab_size)?;
        self.take("dim", &mut spec.dim)?;
        self.take("words_min", &mut spec.words_min)?;
        self.take("words_max", &mut spec.words_max)?;
        self.take("frames_min", &mut spec.frames_min)?;
        self.take("frames_max", &mut spec.frames_max)?;
        self.take("gap_min", &mut spec.gap_min)?;
        self.take("gap_max", &mut spec.gap_max)?;
        self.take("noise_std", &mut spec.noise_std)?;
        self.take("confusable_fraction", &mut spec.confusable_fraction)?;
        self.take("frame_period", &mut spec.frame_period)?;
        spec.validate()
    }

    /// Overlay encoder-architecture and head keys onto `cfg` and validate.
    pub fn apply_encoder(&mut self, cfg: &mut EncoderConfig) -> Result<()> {
        self.take("feature_dim", &mut cfg.feature_dim)?;
        self.take("embed_dim", &mut cfg.embed_dim)?;
        self.take("hypotheses", &mut cfg.hypotheses)?;
        self.take("hidden1", &mut cfg.hidden.0)?;
        self.take("hidden2", &mut cfg.hidden.1)?;
        self.take("context", &mut cfg.context)?;
        self.take("offset_limit", &mut cfg.heads.offset_limit)?;
        self.take("duration_scale", &mut cfg.heads.duration_scale)?;
        self.take("frame_period", &mut cfg.heads.frame_period)?;
        cfg.validate()
    }

    /// Overlay training-loop keys onto `cfg` (the evaluation decoder is
    /// configured separately via [`Settings::apply_decoder`]).
    pub fn apply_train(&mut self, cfg: &mut TrainConfig) -> Result<()> {
        self.take("batch_size", &mut cfg.batch_size)?;
        self.take("epochs", &mut cfg.epochs)?;
        self.take("holdout_fraction", &mut cfg.holdout_fraction)?;
        self.take("sample_m", &mut cfg.sample_m)?;
        self.take("sigma", &mut cfg.sigma)?;
        self.take("seed", &mut cfg.seed)?;
        Ok(())
    }

    /// Overlay learning-rate schedule keys onto `sched` and validate.
    pub fn apply_schedule(&mut self, sched: &mut LrSchedule) -> Result<()> {
        self.take("p1", &mut sched.p1)?;
        self.take("p2", &mut sched.p2)?;
        self.take("gamma_decay", &mut sched.gamma_decay)?;
        self.take("peak", &mut sched.peak)?;
        sched.validate()
    }

    /// Overlay beam-search keys onto `cfg` and validate.  `overlap_gamma`
    /// accepts `inf` to disable the overlap gate.
    pub fn apply_decoder(&mut self, cfg: &mut DecoderConfig) -> Result<()> {
        self.take("input_beam", &mut cfg.input_beam)?;
        self.take("label_beam", &mut cfg.label_beam)?;
        self.take("word_beam", &mut cfg.word_beam)?;
        self.take("lm_weight", &mut cfg.lm_weight)?;
        self.take("class_weight", &mut cfg.class_weight)?;
        self.take("blank_divisor", &mut cfg.blank_divisor)?;
        self.take("overlap_gamma", &mut cfg.overlap_gamma)?;
        cfg.validate()
    }
}
