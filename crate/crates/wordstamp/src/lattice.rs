//! Word lattices and confusion networks.
//!
//! The decoder's surviving prefix tree becomes a lattice: nodes are
//! prefixes, arcs carry the emitted word with its timestamp and scores,
//! and a node reached by a complete hypothesis holds a final weight that
//! tops its path mass up to the hypothesis total.  A confusion network
//! flattens the lattice into time bins of competing words with posteriors,
//! adding an epsilon entry where some paths skip the bin.

use crate::{Error, Result};

/// One lattice arc: a word emission with times in milliseconds.
#[derive(Debug, Clone)]
pub struct LatticeArc {
    pub from: usize,
    pub to: usize,
    pub word: String,
    pub start_ms: i64,
    pub end_ms: i64,
    /// Log posterior of the word at its emission frame.
    pub acoustic: f64,
    /// Raw LM log-probability of the word given the path history.
    pub lm: f64,
    /// Fused search-score increment of this emission; path weights for
    /// posterior computation sum these.
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct LatticeNode {
    /// Frame at which the prefix first survived pruning.
    pub frame: usize,
    /// Present when the prefix is a complete hypothesis: total hypothesis
    /// score minus the arc weights on its path.
    pub final_weight: Option<f64>,
}

/// Prefix-tree lattice; node 0 is the empty prefix.
#[derive(Debug, Clone, Default)]
pub struct Lattice {
    pub nodes: Vec<LatticeNode>,
    pub arcs: Vec<LatticeArc>,
}

impl Lattice {
    pub fn empty() -> Self {
        Lattice {
            nodes: vec![LatticeNode { frame: 0, final_weight: None }],
            arcs: Vec::new(),
        }
    }

    /// Is every arc forward-pointing (acyclic by construction)?
    pub fn is_topological(&self) -> bool {
        self.arcs.iter().all(|a| a.from < a.to && a.to < self.nodes.len())
    }

    /// Render one line per arc, `word:start-end acoustic,lm`, sorted by
    /// start time then word.
    pub fn to_text(&self) -> String {
        let mut arcs: Vec<&LatticeArc> = self.arcs.iter().collect();
        arcs.sort_by(|a, b| {
            (a.start_ms, &a.word, a.end_ms).cmp(&(b.start_ms, &b.word, b.end_ms))
        });
        let mut out = String::new();
        for a in arcs {
            out.push_str(&format!(
                "{}:{}-{} {:.4},{:.4}\n",
                a.word, a.start_ms, a.end_ms, a.acoustic, a.lm
            ));
        }
        out
    }
}

/// Arc fields recoverable from the text form.
pub type ArcSummary = (String, i64, i64, f64, f64);

/// Parse the [`Lattice::to_text`] format back into per-arc summaries.
pub fn parse_text(text: &str) -> Result<Vec<ArcSummary>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (head, scores) = line
            .rsplit_once(' ')
            .ok_or_else(|| Error::parse(line_no, "expected `word:start-end acoustic,lm`"))?;
        let (word, span) = head
            .split_once(':')
            .ok_or_else(|| Error::parse(line_no, "missing `:` between word and span"))?;
        let (start, end) = span
            .split_once('-')
            .ok_or_else(|| Error::parse(line_no, "missing `-` inside span"))?;
        let (acoustic, lm) = scores
            .split_once(',')
            .ok_or_else(|| Error::parse(line_no, "missing `,` between scores"))?;
        out.push((
            word.to_string(),
            crate::textio::parse_field(start, line_no, "start_ms")?,
            crate::textio::parse_field(end, line_no, "end_ms")?,
            crate::textio::parse_field(acoustic, line_no, "acoustic score")?,
            crate::textio::parse_field(lm, line_no, "lm score")?,
        ));
    }
    Ok(out)
}

/// One confusion-network alternative; `word` is `None` for the epsilon
/// (skip) entry.
#[derive(Debug, Clone)]
pub struct CnEntry {
    pub word: Option<String>,
    pub posterior: f64,
    pub start_ms: i64,
    pub end_ms: i64,
}

#[derive(Debug, Clone)]
pub struct CnBin {
    pub entries: Vec<CnEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct ConfusionNetwork {
    pub bins: Vec<CnBin>,
}

impl ConfusionNetwork {
    /// Render one line per entry: `bin_index word posterior start_ms end_ms`,
    /// with `<eps>` for the skip entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, bin) in self.bins.iter().enumerate() {
            for e in &bin.entries {
                out.push_str(&format!(
                    "{i} {} {:.6} {} {}\n",
                    e.word.as_deref().unwrap_or("<eps>"),
                    e.posterior,
                    e.start_ms,
                    e.end_ms
                ));
            }
        }
        out
    }
}

// Log-domain path mass flowing into each node from node 0.
fn forward_masses(lat: &Lattice) -> Vec<f64> {
    let mut alpha = vec![f64::NEG_INFINITY; lat.nodes.len()];
    alpha[0] = 0.0;
    // Arcs are forward-pointing, so one pass in target order suffices once
    // arcs are grouped; iterating arcs sorted by `to` is equivalent.
    let mut order: Vec<usize> = (0..lat.arcs.len()).collect();
    order.sort_by_key(|&i| lat.arcs[i].to);
    for i in order {
        let a = &lat.arcs[i];
        alpha[a.to] = log_add(alpha[a.to], alpha[a.from] + a.weight);
    }
    alpha
}

// Log-domain mass from each node to any final node, final weights included.
fn backward_masses(lat: &Lattice) -> Vec<f64> {
    let mut beta: Vec<f64> = lat
        .nodes
        .iter()
        .map(|n| n.final_weight.unwrap_or(f64::NEG_INFINITY))
        .collect();
    let mut order: Vec<usize> = (0..lat.arcs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(lat.arcs[i].from));
    for i in order {
        let a = &lat.arcs[i];
        beta[a.from] = log_add(beta[a.from], a.weight + beta[a.to]);
    }
    beta
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

fn overlap(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0)
}

/// Cluster lattice arcs into time bins and convert path mass into word
/// posteriors per bin.
///
/// Two arcs share a bin when their intervals overlap by at least half of
/// the shorter one (greedily, against the bin's running mean interval).
/// Bin posteriors, including the epsilon entry covering paths that skip
/// the bin, sum to one.
pub fn lattice_to_cn(lat: &Lattice) -> Result<ConfusionNetwork> {
    if !lat.is_topological() {
        return Err(Error::invalid("lattice arcs must point forward"));
    }
    if lat.arcs.is_empty() {
        return Ok(ConfusionNetwork::default());
    }
    let alpha = forward_masses(lat);
    let beta = backward_masses(lat);
    let total = beta[0];
    if total == f64::NEG_INFINITY {
        return Err(Error::invalid("lattice has no complete path"));
    }

    struct BinAcc {
        sum_start: f64,
        sum_end: f64,
        members: Vec<(usize, f64)>, // arc index, posterior
    }
    impl BinAcc {
        fn interval(&self) -> (i64, i64) {
            let n = self.members.len() as f64;
            ((self.sum_start / n).round() as i64, (self.sum_end / n).round() as i64)
        }
    }

    let mut order: Vec<usize> = (0..lat.arcs.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &lat.arcs[i];
        let b = &lat.arcs[j];
        (a.start_ms, a.end_ms, &a.word).cmp(&(b.start_ms, b.end_ms, &b.word))
    });

    let mut bins: Vec<BinAcc> = Vec::new();
    for idx in order {
        let a = &lat.arcs[idx];
        let posterior = (alpha[a.from] + a.weight + beta[a.to] - total).exp();
        let span = (a.start_ms, a.end_ms);
        let len = (a.end_ms - a.start_ms).max(1);
        let mut best: Option<(usize, i64)> = None;
        for (b, bin) in bins.iter().enumerate() {
            let bi = bin.interval();
            let blen = (bi.1 - bi.0).max(1);
            let ov = overlap(span, bi);
            if 2 * ov >= len.min(blen) && best.is_none_or(|(_, bo)| ov > bo) {
                best = Some((b, ov));
            }
        }
        match best {
            Some((b, _)) => {
                bins[b].sum_start += a.start_ms as f64;
                bins[b].sum_end += a.end_ms as f64;
                bins[b].members.push((idx, posterior));
            }
            None => bins.push(BinAcc {
                sum_start: a.start_ms as f64,
                sum_end: a.end_ms as f64,
                members: vec![(idx, posterior)],
            }),
        }
    }

    bins.sort_by_key(BinAcc::interval);
    let mut out = ConfusionNetwork::default();
    for bin in bins {
        // Merge same-word members; the best-posterior arc donates its span.
        let mut merged: Vec<(String, f64, i64, i64, f64)> = Vec::new();
        for &(idx, p) in &bin.members {
            let a = &lat.arcs[idx];
            match merged.iter_mut().find(|(w, ..)| *w == a.word) {
                Some(entry) => {
                    entry.1 += p;
                    if p > entry.4 {
                        entry.2 = a.start_ms;
                        entry.3 = a.end_ms;
                        entry.4 = p;
                    }
                }
                None => merged.push((a.word.clone(), p, a.start_ms, a.end_ms, p)),
            }
        }
        let mut mass: f64 = merged.iter().map(|m| m.1).sum();
        if mass > 1.0 + 1e-9 {
            // Same-path arcs landed in one bin; renormalize so the bin
            // stays a distribution.
            for m in &mut merged {
                m.1 /= mass;
            }
            mass = 1.0;
        }
        merged.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0))
        });
        let span = {
            let n = bin.members.len() as f64;
            ((bin.sum_start / n).round() as i64, (bin.sum_end / n).round() as i64)
        };
        let mut entries: Vec<CnEntry> = merged
            .into_iter()
            .map(|(word, posterior, start_ms, end_ms, _)| CnEntry {
                word: Some(word),
                posterior,
                start_ms,
                end_ms,
            })
            .collect();
        let eps = 1.0 - mass;
        if eps > 1e-9 {
            entries.push(CnEntry {
                word: None,
                posterior: eps,
                start_ms: span.0,
                end_ms: span.1,
            });
        }
        out.bins.push(CnBin { entries });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(frame: usize, final_weight: Option<f64>) -> LatticeNode {
        LatticeNode { frame, final_weight }
    }

    fn arc(from: usize, to: usize, word: &str, span: (i64, i64), weight: f64) -> LatticeArc {
        LatticeArc {
            from,
            to,
            word: word.into(),
            start_ms: span.0,
            end_ms: span.1,
            acoustic: weight,
            lm: 0.0,
            weight,
        }
    }

    #[test]
    fn linear_lattice_gives_one_certain_bin_per_word() {
        let lat = Lattice {
            nodes: vec![node(0, None), node(2, None), node(5, Some(0.0))],
            arcs: vec![
                arc(0, 1, "turn", (100, 300), -0.2),
                arc(1, 2, "off", (350, 600), -0.1),
            ],
        };
        let cn = lattice_to_cn(&lat).unwrap();
        assert_eq!(cn.bins.len(), 2);
        for (bin, word) in cn.bins.iter().zip(["turn", "off"]) {
            assert_eq!(bin.entries.len(), 1);
            assert_eq!(bin.entries[0].word.as_deref(), Some(word));
            assert!((bin.entries[0].posterior - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn parallel_arcs_compete_in_one_bin() {
        let lat = Lattice {
            nodes: vec![node(0, None), node(3, Some(0.0)), node(3, Some(0.0))],
            arcs: vec![
                arc(0, 1, "four", (100, 400), (0.7f64).ln()),
                arc(0, 2, "for", (100, 400), (0.3f64).ln()),
            ],
        };
        let cn = lattice_to_cn(&lat).unwrap();
        assert_eq!(cn.bins.len(), 1);
        let bin = &cn.bins[0];
        assert_eq!(bin.entries.len(), 2);
        let total: f64 = bin.entries.iter().map(|e| e.posterior).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(bin.entries[0].word.as_deref(), Some("four"));
        assert!((bin.entries[0].posterior - 0.7).abs() < 1e-6);
    }

    #[test]
    fn skipped_span_gets_an_epsilon_entry() {
        // Path 1: one long word.  Path 2: a short word plus a filler; the
        // filler bin is skipped by path 1, so it needs an epsilon entry.
        let p1 = (0.6f64).ln();
        let p2 = (0.4f64).ln();
        let lat = Lattice {
            nodes: vec![
                node(0, None),
                node(8, Some(0.0)),
                node(5, None),
                node(8, Some(0.0)),
            ],
            arcs: vec![
                arc(0, 1, "fursten", (200, 800), p1),
                arc(0, 2, "first", (200, 500), p2),
                arc(2, 3, "and", (600, 800), 0.0),
            ],
        };
        let cn = lattice_to_cn(&lat).unwrap();
        assert_eq!(cn.bins.len(), 2);
        let first_bin = &cn.bins[0];
        let words: Vec<_> =
            first_bin.entries.iter().map(|e| e.word.as_deref().unwrap()).collect();
        assert!(words.contains(&"fursten") && words.contains(&"first"));
        let and_bin = &cn.bins[1];
        assert_eq!(and_bin.entries[0].word.as_deref(), Some("and"));
        assert!((and_bin.entries[0].posterior - 0.4).abs() < 1e-6);
        let eps = and_bin.entries.iter().find(|e| e.word.is_none()).expect("epsilon entry");
        assert!((eps.posterior - 0.6).abs() < 1e-6);
        // Every bin remains a distribution.
        for bin in &cn.bins {
            let total: f64 = bin.entries.iter().map(|e| e.posterior).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn interior_final_nodes_count_as_complete_paths() {
        // "turn off" is both a hypothesis and a prefix of "turn off now".
        let lat = Lattice {
            nodes: vec![
                node(0, None),
                node(2, None),
                node(5, Some((0.5f64).ln())),
                node(9, Some(0.0)),
            ],
            arcs: vec![
                arc(0, 1, "turn", (0, 200), (0.9f64).ln()),
                arc(1, 2, "off", (250, 500), 0.0),
                arc(2, 3, "now", (600, 900), (0.5f64).ln() + (0.9f64).ln().abs() * 0.0),
            ],
        };
        // Path totals: turn-off = ln 0.9 + 0 + ln 0.5; turn-off-now = ln 0.9 + ln 0.5.
        let cn = lattice_to_cn(&lat).unwrap();
        let now_bin = cn.bins.last().unwrap();
        let eps = now_bin.entries.iter().find(|e| e.word.is_none()).expect("epsilon");
        assert!((eps.posterior - 0.5).abs() < 1e-6, "{}", eps.posterior);
    }

    #[test]
    fn text_round_trip_reproduces_the_arc_set() {
        let lat = Lattice {
            nodes: vec![node(0, None), node(3, Some(0.0)), node(4, Some(0.0))],
            arcs: vec![
                LatticeArc {
                    from: 0,
                    to: 1,
                    word: "low".into(),
                    start_ms: 480,
                    end_ms: 830,
                    acoustic: -1.2345,
                    lm: -0.6931,
                    weight: -1.5,
                },
                LatticeArc {
                    from: 0,
                    to: 2,
                    word: "go".into(),
                    start_ms: 120,
                    end_ms: 400,
                    acoustic: -0.25,
                    lm: -1.0,
                    weight: -0.5,
                },
            ],
        };
        let text = lat.to_text();
        // Sorted by start time then word.
        assert!(text.starts_with("go:120-400"));
        let arcs = parse_text(&text).unwrap();
        assert_eq!(arcs.len(), 2);
        assert!(arcs.contains(&("low".to_string(), 480, 830, -1.2345, -0.6931)));
        assert!(arcs.contains(&("go".to_string(), 120, 400, -0.25, -1.0)));

        let err = parse_text("nonsense line\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn confusion_network_text_lists_bins_in_order() {
        let cn = ConfusionNetwork {
            bins: vec![
                CnBin {
                    entries: vec![CnEntry {
                        word: Some("hey".into()),
                        posterior: 1.0,
                        start_ms: 0,
                        end_ms: 200,
                    }],
                },
                CnBin {
                    entries: vec![
                        CnEntry {
                            word: Some("you".into()),
                            posterior: 0.75,
                            start_ms: 250,
                            end_ms: 500,
                        },
                        CnEntry { word: None, posterior: 0.25, start_ms: 250, end_ms: 500 },
                    ],
                },
            ],
        };
        let text = cn.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("0 hey 1.000000"));
        assert!(lines[2].starts_with("1 <eps> 0.250000"));
    }
}
