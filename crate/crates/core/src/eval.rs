//! M2-style scoring: token-alignment edit extraction, best-annotator
//! matching, and corpus-level precision / recall / F0.5.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{tokenize, GoldAnnotatedSample, GoldAnnotation, TokenSequence, TokenizationMode};
use crate::error::{Error, Result};

/// An untyped edit on source tokens `[start, end)`. Deletions carry an empty
/// replacement; insertions have `start == end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditSpan {
    pub start: usize,
    pub end: usize,
    pub replacement: String,
}

impl EditSpan {
    pub fn is_insertion(&self) -> bool {
        self.start == self.end
    }

    pub fn is_deletion(&self) -> bool {
        self.replacement.is_empty()
    }
}

impl From<&GoldAnnotation> for EditSpan {
    fn from(g: &GoldAnnotation) -> Self {
        EditSpan {
            start: g.start,
            end: g.end,
            replacement: g.replacement.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// Minimal-cost token alignment (unit substitution and indel costs). Among
/// equal-cost alignments the one with more matches wins, then the one whose
/// substitutions come leftmost.
pub fn align(src: &[String], hyp: &[String]) -> Vec<AlignOp> {
    let (n, m) = (src.len(), hyp.len());
    // suffix tables: best (cost, matches) for aligning src[i..] with hyp[j..]
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    let mut matches = vec![0usize; (n + 1) * w];
    let at = |i: usize, j: usize| i * w + j;
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            if i == n && j == m {
                continue;
            }
            let mut best: Option<(usize, usize)> = None;
            let mut offer = |c: usize, k: usize| {
                let better = match best {
                    None => true,
                    Some((bc, bk)) => c < bc || (c == bc && k > bk),
                };
                if better {
                    best = Some((c, k));
                }
            };
            if i < n && j < m {
                let same = src[i] == hyp[j];
                let step = usize::from(!same);
                offer(
                    cost[at(i + 1, j + 1)] + step,
                    matches[at(i + 1, j + 1)] + usize::from(same),
                );
            }
            if i < n {
                offer(cost[at(i + 1, j)] + 1, matches[at(i + 1, j)]);
            }
            if j < m {
                offer(cost[at(i, j + 1)] + 1, matches[at(i, j + 1)]);
            }
            let (c, k) = best.expect("at least one move");
            cost[at(i, j)] = c;
            matches[at(i, j)] = k;
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let target = (cost[at(i, j)], matches[at(i, j)]);
        if i < n && j < m {
            let same = src[i] == hyp[j];
            let via = (
                cost[at(i + 1, j + 1)] + usize::from(!same),
                matches[at(i + 1, j + 1)] + usize::from(same),
            );
            if via == target {
                ops.push(if same { AlignOp::Match } else { AlignOp::Substitute });
                i += 1;
                j += 1;
                continue;
            }
        }
        if i < n && (cost[at(i + 1, j)] + 1, matches[at(i + 1, j)]) == target {
            ops.push(AlignOp::Delete);
            i += 1;
        } else {
            ops.push(AlignOp::Insert);
            j += 1;
        }
    }
    ops
}

/// Aligns source and hypothesis tokens and merges each contiguous run of
/// non-matching operations into one edit.
pub fn extract_edits(source: &TokenSequence, hypothesis: &TokenSequence) -> Vec<EditSpan> {
    let joiner = source.mode.joiner();
    let ops = align(&source.tokens, &hypothesis.tokens);
    let mut edits = Vec::new();
    let (mut i, mut j) = (0, 0);
    let mut open: Option<(usize, usize)> = None;
    let mut close = |open: &mut Option<(usize, usize)>, i: usize, j: usize| {
        if let Some((si, sj)) = open.take() {
            edits.push(EditSpan {
                start: si,
                end: i,
                replacement: hypothesis.tokens[sj..j].join(joiner),
            });
        }
    };
    for op in ops {
        match op {
            AlignOp::Match => {
                close(&mut open, i, j);
                i += 1;
                j += 1;
            }
            other => {
                open.get_or_insert((i, j));
                match other {
                    AlignOp::Substitute => {
                        i += 1;
                        j += 1;
                    }
                    AlignOp::Delete => i += 1,
                    AlignOp::Insert => j += 1,
                    AlignOp::Match => unreachable!(),
                }
            }
        }
    }
    close(&mut open, i, j);
    edits
}

/// Alignment cost represented by a set of merged edits: a run without matches
/// spanning `p` source and `q` target tokens costs `max(p, q)`.
pub fn edit_cost(edits: &[EditSpan], mode: TokenizationMode) -> usize {
    edits
        .iter()
        .map(|e| (e.end - e.start).max(tokenize(&e.replacement, mode).len()))
        .sum()
}

/// Applies sorted, non-overlapping edits to source tokens.
pub fn apply_edits(source: &TokenSequence, edits: &[EditSpan]) -> TokenSequence {
    let mut out = Vec::with_capacity(source.len());
    let mut cursor = 0;
    for e in edits {
        out.extend_from_slice(&source.tokens[cursor..e.start]);
        out.extend(tokenize(&e.replacement, source.mode).tokens);
        cursor = e.end;
    }
    out.extend_from_slice(&source.tokens[cursor..]);
    TokenSequence {
        tokens: out,
        mode: source.mode,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SentenceCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub chosen_annotator: u32,
}

/// Precision and recall with the M2 conventions: 1.0 on an empty denominator.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let p = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    (p, r)
}

/// F_beta with beta = 0.5; zero when the denominator vanishes.
pub fn f_half(precision: f64, recall: f64) -> f64 {
    let denom = 0.25 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        1.25 * precision * recall / denom
    }
}

fn normalized_key(e: &EditSpan, mode: TokenizationMode) -> (usize, usize, String) {
    let nfc: String = e.replacement.nfc().collect();
    (e.start, e.end, tokenize(&nfc, mode).join())
}

/// Counts matches against each annotator and keeps the annotator with the
/// best sentence F0.5 (ties: more true positives, then lower annotator id).
pub fn match_sentence(
    sys_edits: &[EditSpan],
    gold: &GoldAnnotatedSample,
    mode: TokenizationMode,
) -> SentenceCounts {
    let sys: Vec<_> = sys_edits.iter().map(|e| normalized_key(e, mode)).collect();
    let mut best: Option<(f64, SentenceCounts)> = None;
    for (&annotator, edits) in &gold.annotations {
        let mut pool: HashMap<(usize, usize, String), usize> = HashMap::new();
        for g in edits {
            *pool.entry(normalized_key(&g.into(), mode)).or_default() += 1;
        }
        let mut tp = 0;
        for key in &sys {
            if let Some(left) = pool.get_mut(key).filter(|n| **n > 0) {
                *left -= 1;
                tp += 1;
            }
        }
        let counts = SentenceCounts {
            tp,
            fp: sys.len() - tp,
            fn_: edits.len() - tp,
            chosen_annotator: annotator,
        };
        let (p, r) = precision_recall(counts.tp, counts.fp, counts.fn_);
        let f = f_half(p, r);
        let better = match &best {
            None => true,
            Some((bf, bc)) => f > *bf || (f == *bf && counts.tp > bc.tp),
        };
        if better {
            best = Some((f, counts));
        }
    }
    best.map(|(_, c)| c).unwrap_or(SentenceCounts {
        tp: 0,
        fp: sys.len(),
        fn_: 0,
        chosen_annotator: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    #[serde(rename = "f0_5")]
    pub f_half: f64,
    pub n_sentences: usize,
}

impl ScoreReport {
    /// The same report with P, R and F0.5 rounded to four decimals.
    pub fn rounded(&self) -> Self {
        let r4 = |x: f64| (x * 1e4).round() / 1e4;
        Self {
            precision: r4(self.precision),
            recall: r4(self.recall),
            f_half: r4(self.f_half),
            ..*self
        }
    }
}

impl std::fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "P={:.2} R={:.2} F0.5={:.2} (TP={} FP={} FN={}, {} sentences)",
            self.precision * 100.0,
            self.recall * 100.0,
            self.f_half * 100.0,
            self.tp,
            self.fp,
            self.fn_,
            self.n_sentences
        )
    }
}

pub fn score(per_sentence: &[SentenceCounts]) -> ScoreReport {
    let (tp, fp, fn_) = per_sentence
        .iter()
        .fold((0, 0, 0), |(a, b, c), s| (a + s.tp, b + s.fp, c + s.fn_));
    let (precision, recall) = precision_recall(tp, fp, fn_);
    ScoreReport {
        tp,
        fp,
        fn_,
        precision,
        recall,
        f_half: f_half(precision, recall),
        n_sentences: per_sentence.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceDiagnostic {
    pub index: usize,
    #[serde(flatten)]
    pub counts: SentenceCounts,
    pub sys_edits: Vec<EditSpan>,
    pub gold_edits: Vec<EditSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: ScoreReport,
    pub sentences: Vec<SentenceDiagnostic>,
}

/// Builds gold annotations from parallel references: reference list `k`
/// becomes annotator `k`. Source text is stored as space-joined tokens so
/// that M2 offsets line up under either tokenization mode.
pub fn gold_from_references(
    sources: &[String],
    references: &[Vec<String>],
    mode: TokenizationMode,
) -> Result<Vec<GoldAnnotatedSample>> {
    for refs in references {
        if refs.len() != sources.len() {
            return Err(Error::CountMismatch {
                predictions: refs.len(),
                gold: sources.len(),
            });
        }
    }
    Ok(sources
        .iter()
        .enumerate()
        .map(|(i, src)| {
            let src_tokens = tokenize(src, mode);
            let annotations = references
                .iter()
                .enumerate()
                .map(|(k, refs)| {
                    let edits = extract_edits(&src_tokens, &tokenize(&refs[i], mode))
                        .into_iter()
                        .map(|e| GoldAnnotation {
                            start: e.start,
                            end: e.end,
                            replacement: e.replacement,
                            type_label: "UNK".into(),
                        })
                        .collect();
                    (k as u32, edits)
                })
                .collect();
            GoldAnnotatedSample {
                source_text: src_tokens.tokens.join(" "),
                annotations,
            }
        })
        .collect())
}

/// Scores hypotheses against order-aligned gold sentences.
pub fn evaluate_run(
    hypotheses: &[String],
    gold: &[GoldAnnotatedSample],
    mode: TokenizationMode,
) -> Result<Evaluation> {
    if hypotheses.len() != gold.len() {
        return Err(Error::CountMismatch {
            predictions: hypotheses.len(),
            gold: gold.len(),
        });
    }
    for (i, g) in gold.iter().enumerate() {
        let has_edits = g.annotations.values().any(|e| !e.is_empty());
        let in_mode = tokenize(&g.source_text, mode).len();
        let on_disk = g.source_text.split_whitespace().count();
        if has_edits && in_mode != on_disk {
            return Err(Error::ModeMismatch(format!(
                "sentence {i}: gold offsets index {on_disk} whitespace tokens but {mode:?} tokenization yields {in_mode}"
            )));
        }
    }
    let sentences: Vec<SentenceDiagnostic> = hypotheses
        .par_iter()
        .zip(gold.par_iter())
        .enumerate()
        .map(|(index, (hyp, g))| {
            let src = tokenize(&g.source_text, mode);
            let sys_edits = extract_edits(&src, &tokenize(hyp, mode));
            let counts = match_sentence(&sys_edits, g, mode);
            let gold_edits = g
                .annotations
                .get(&counts.chosen_annotator)
                .map(|v| v.iter().map(EditSpan::from).collect())
                .unwrap_or_default();
            SentenceDiagnostic {
                index,
                counts,
                sys_edits,
                gold_edits,
            }
        })
        .collect();
    let counts: Vec<SentenceCounts> = sentences.iter().map(|s| s.counts).collect();
    Ok(Evaluation {
        report: score(&counts),
        sentences,
    })
}
