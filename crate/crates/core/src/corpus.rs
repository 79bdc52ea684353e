//! Labeled GEC data: parallel-corpus readers, M2 gold annotations,
//! tokenization, and the length/cap filter used before database construction.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// One labeled pair: possibly erroneous input and its correction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub input_text: String,
    pub corrected_text: String,
    pub language: String,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        input_text: impl Into<String>,
        corrected_text: impl Into<String>,
        language: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            input_text: input_text.into(),
            corrected_text: corrected_text.into(),
            language: language.into(),
        }
    }

    /// True when the normalized input differs from the normalized correction.
    pub fn is_erroneous(&self) -> bool {
        normalize_text(&self.input_text) != normalize_text(&self.corrected_text)
    }
}

/// A gold edit from an M2 A-line. `start == end` is an insertion before `start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub start: usize,
    pub end: usize,
    pub replacement: String,
    pub type_label: String,
}

/// One M2 S-block: a tokenized source sentence plus every annotator's edits.
///
/// An annotator mapped to an empty list asserts the sentence needs no correction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotatedSample {
    pub source_text: String,
    pub annotations: BTreeMap<u32, Vec<GoldAnnotation>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizationMode {
    Whitespace,
    Character,
}

impl TokenizationMode {
    /// CJK languages tokenize per character; everything else on whitespace.
    pub fn for_language(language: &str) -> Self {
        let primary = language
            .split(['-', '_'])
            .next()
            .unwrap_or("")
            .to_ascii_lowercase();
        match primary.as_str() {
            "zh" | "cmn" | "yue" | "ja" | "ko" => TokenizationMode::Character,
            _ => TokenizationMode::Whitespace,
        }
    }

    pub fn joiner(self) -> &'static str {
        match self {
            TokenizationMode::Whitespace => " ",
            TokenizationMode::Character => "",
        }
    }
}

impl std::str::FromStr for TokenizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(TokenizationMode::Whitespace),
            "character" | "char" => Ok(TokenizationMode::Character),
            other => Err(Error::Config(format!(
                "unknown tokenization mode `{other}` (expected whitespace or character)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub mode: TokenizationMode,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn join(&self) -> String {
        self.tokens.join(self.mode.joiner())
    }
}

pub fn tokenize(text: &str, mode: TokenizationMode) -> TokenSequence {
    let tokens = match mode {
        TokenizationMode::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        TokenizationMode::Character => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    };
    TokenSequence { tokens, mode }
}

/// Unicode NFC, internal whitespace runs collapsed to one space, trimmed.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParallelFormat {
    Tsv,
    Jsonl,
}

impl ParallelFormat {
    pub fn from_path(path: &std::path::Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "tsv" | "txt" => Some(ParallelFormat::Tsv),
            "jsonl" | "json" => Some(ParallelFormat::Jsonl),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    label: String,
    #[serde(default)]
    id: Option<String>,
}

/// Reads newline-delimited records, yielding `(1-based line number, line)`.
/// Invalid UTF-8 is reported against its line.
pub(crate) fn read_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader.split(b'\n').enumerate().map(|(i, bytes)| {
        let line_no = i + 1;
        let mut bytes = bytes.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if bytes.last() == Some(&b'\r') {
            bytes.pop();
        }
        String::from_utf8(bytes)
            .map(|s| (line_no, s))
            .map_err(|_| Error::Parse {
                line: line_no,
                message: "invalid UTF-8".into(),
            })
    })
}

/// Parses a TSV or JSONL parallel corpus. Blank lines are skipped; line
/// numbers in ids and errors are 1-based physical line numbers.
pub fn parse_parallel<R: BufRead>(
    reader: R,
    format: ParallelFormat,
    corpus_name: &str,
    language: &str,
) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for item in read_lines(reader) {
        let (line, text) = item?;
        if text.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Parse { line, message };
        let (id, input, corrected) = match format {
            ParallelFormat::Tsv => {
                let fields: Vec<&str> = text.split('\t').collect();
                if fields.len() != 2 {
                    return Err(fail(format!(
                        "expected 2 tab-separated fields, found {}",
                        fields.len()
                    )));
                }
                (None, fields[0].to_owned(), fields[1].to_owned())
            }
            ParallelFormat::Jsonl => {
                let rec: JsonlRecord = serde_json::from_str(&text).map_err(|e| fail(e.to_string()))?;
                (rec.id, rec.text, rec.label)
            }
        };
        if input.trim().is_empty() || corrected.trim().is_empty() {
            return Err(fail("empty input or corrected text".into()));
        }
        let id = id.unwrap_or_else(|| format!("{corpus_name}:{line}"));
        if !seen.insert(id.clone()) {
            return Err(fail(format!("duplicate sample id `{id}`")));
        }
        samples.push(Sample {
            id,
            input_text: input,
            corrected_text: corrected,
            language: language.to_owned(),
        });
    }
    Ok(samples)
}

const M2_NONE: &str = "-NONE-";

/// Parses M2 gold annotations. A-lines are grouped by their trailing annotator id.
pub fn parse_m2<R: BufRead>(reader: R) -> Result<Vec<GoldAnnotatedSample>> {
    let mut out = Vec::new();
    let mut current: Option<GoldAnnotatedSample> = None;

    let finish = |cur: Option<GoldAnnotatedSample>, out: &mut Vec<GoldAnnotatedSample>| {
        if let Some(mut s) = cur {
            if s.annotations.is_empty() {
                s.annotations.insert(0, Vec::new());
            }
            out.push(s);
        }
    };

    for item in read_lines(reader) {
        let (line, text) = item.map_err(|e| match e {
            Error::Parse { line, message } => Error::M2 { line, message },
            other => other,
        })?;
        let fail = |message: String| Error::M2 { line, message };
        if text.trim().is_empty() {
            finish(current.take(), &mut out);
            continue;
        }
        if let Some(src) = text
            .strip_prefix("S ")
            .or(if text == "S" { Some("") } else { None })
        {
            finish(current.take(), &mut out);
            current = Some(GoldAnnotatedSample {
                source_text: src.to_owned(),
                annotations: BTreeMap::new(),
            });
        } else if let Some(rest) = text.strip_prefix("A ") {
            let block = current
                .as_mut()
                .ok_or_else(|| fail("A-line before any S-line".into()))?;
            let fields: Vec<&str> = rest.split("|||").collect();
            if fields.len() < 3 {
                return Err(fail(format!("malformed A-line `{text}`")));
            }
            let annotator: u32 = fields[fields.len() - 1]
                .trim()
                .parse()
                .map_err(|_| fail(format!("non-integer annotator id in `{text}`")))?;
            let mut span = fields[0].split_whitespace();
            let (Some(s), Some(e), None) = (span.next(), span.next(), span.next()) else {
                return Err(fail(format!("malformed span `{}`", fields[0])));
            };
            let start: i64 = s.parse().map_err(|_| fail(format!("non-integer offset `{s}`")))?;
            let end: i64 = e.parse().map_err(|_| fail(format!("non-integer offset `{e}`")))?;
            let type_label = fields[1];
            let edits = block.annotations.entry(annotator).or_default();
            if type_label == "noop" || start < 0 || end < 0 {
                continue;
            }
            let n_tokens = block.source_text.split_whitespace().count() as i64;
            if start > end || end > n_tokens {
                return Err(fail(format!("offsets {start} {end} outside 0..={n_tokens}")));
            }
            let replacement = if fields[2] == M2_NONE { "" } else { fields[2] };
            edits.push(GoldAnnotation {
                start: start as usize,
                end: end as usize,
                replacement: replacement.to_owned(),
                type_label: type_label.to_owned(),
            });
        } else {
            return Err(fail(format!("unrecognized line `{text}`")));
        }
    }
    finish(current, &mut out);
    Ok(out)
}

/// Emits M2 text. Annotators with no edits are written as noop lines.
pub fn serialize_m2(samples: &[GoldAnnotatedSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let _ = writeln!(out, "S {}", s.source_text);
        for (annotator, edits) in &s.annotations {
            if edits.is_empty() {
                let _ = writeln!(
                    out,
                    "A -1 -1|||noop|||{M2_NONE}|||REQUIRED|||{M2_NONE}|||{annotator}"
                );
            }
            for e in edits {
                let _ = writeln!(
                    out,
                    "A {} {}|||{}|||{}|||REQUIRED|||{M2_NONE}|||{annotator}",
                    e.start, e.end, e.type_label, e.replacement
                );
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthFilter {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub cap: usize,
}

impl Default for LengthFilter {
    fn default() -> Self {
        Self {
            min_tokens: 10,
            max_tokens: 60,
            cap: 25_000,
        }
    }
}

/// Keeps samples whose input length lies in `[min_tokens, max_tokens]`, then
/// draws a seeded uniform subset of `cap` if too many survive. Relative order
/// of kept samples is preserved.
pub fn filter_samples(samples: &[Sample], filter: &LengthFilter, seed: u64) -> Vec<Sample> {
    let kept: Vec<&Sample> = samples
        .iter()
        .filter(|s| {
            let n = tokenize(&s.input_text, TokenizationMode::for_language(&s.language)).len();
            (filter.min_tokens..=filter.max_tokens).contains(&n)
        })
        .collect();
    if kept.len() <= filter.cap {
        return kept.into_iter().cloned().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, kept.len(), filter.cap).into_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| kept[i].clone()).collect()
}

/// Partitions into `(erroneous, correct)` by normalized equality of x and y.
pub fn split_by_correctness(samples: &[Sample]) -> (Vec<Sample>, Vec<Sample>) {
    samples.iter().cloned().partition(Sample::is_erroneous)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(x: &str, y: &str) -> Sample {
        Sample::new("t:1", x, y, "en")
    }

    #[test]
    fn tsv_line_maps_fields() {
        let s = parse_parallel(
            "He go to school .\tHe goes to school .\n".as_bytes(),
            ParallelFormat::Tsv,
            "toy",
            "en",
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].id, "toy:1");
        assert_eq!(s[0].input_text, "He go to school .");
        assert_eq!(s[0].corrected_text, "He goes to school .");
    }

    #[test]
    fn tsv_wrong_field_count_names_line() {
        let err =
            parse_parallel("a b\ta b\nx\ty\tz\n".as_bytes(), ParallelFormat::Tsv, "toy", "en").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_utf8_names_line() {
        let bytes = b"ok\tok\n\xff\xfe\tbad\n";
        let err = parse_parallel(&bytes[..], ParallelFormat::Tsv, "toy", "en").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn jsonl_identity_pair() {
        let s = parse_parallel(
            r#"{"text": "abc", "label": "abc"}"#.as_bytes(),
            ParallelFormat::Jsonl,
            "j",
            "en",
        )
        .unwrap();
        assert_eq!(s[0].input_text, s[0].corrected_text);
        assert!(!s[0].is_erroneous());
    }

    #[test]
    fn jsonl_explicit_id_kept() {
        let s = parse_parallel(
            r#"{"text": "a", "label": "b", "id": "x7"}"#.as_bytes(),
            ParallelFormat::Jsonl,
            "j",
            "en",
        )
        .unwrap();
        assert_eq!(s[0].id, "x7");
    }

    #[test]
    fn empty_stream_is_empty_list() {
        assert!(parse_parallel("".as_bytes(), ParallelFormat::Tsv, "e", "en")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn m2_single_edit() {
        let g = parse_m2("S He go to school\nA 1 2|||V|||goes|||REQUIRED|||-NONE-|||0\n".as_bytes()).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(
            g[0].annotations[&0],
            vec![GoldAnnotation {
                start: 1,
                end: 2,
                replacement: "goes".into(),
                type_label: "V".into()
            }]
        );
    }

    #[test]
    fn m2_noop_is_empty_edit_list() {
        let g = parse_m2("S Perfect sentence\nA -1 -1|||noop|||-NONE-|||REQUIRED|||-NONE-|||0\n".as_bytes())
            .unwrap();
        assert_eq!(g[0].annotations.len(), 1);
        assert!(g[0].annotations[&0].is_empty());
    }

    #[test]
    fn m2_groups_annotators() {
        let text = "S a b c\nA 0 1|||X|||A|||REQUIRED|||-NONE-|||0\nA 2 3|||X||||||REQUIRED|||-NONE-|||1\n\nS d\nA -1 -1|||noop|||-NONE-|||REQUIRED|||-NONE-|||0\n\n";
        let g = parse_m2(text.as_bytes()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].annotations.keys().copied().collect::<Vec<_>>(), [0, 1]);
        assert_eq!(g[0].annotations[&1][0].replacement, "");
        assert_eq!(serialize_m2(&g), text);
    }

    #[test]
    fn m2_a_line_first_is_error() {
        let err = parse_m2("A 1 2|||V|||goes|||REQUIRED|||-NONE-|||0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::M2 { line: 1, .. }));
    }

    #[test]
    fn m2_non_integer_offsets() {
        let err = parse_m2("S a b\nA x 2|||V|||goes|||REQUIRED|||-NONE-|||0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::M2 { line: 2, .. }));
    }

    #[test]
    fn m2_offsets_beyond_sentence_rejected() {
        assert!(parse_m2("S a b\nA 1 3|||V|||c|||REQUIRED|||-NONE-|||0\n".as_bytes()).is_err());
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(
            tokenize("He goes .", TokenizationMode::Whitespace).tokens,
            ["He", "goes", "."]
        );
        assert_eq!(
            tokenize("他去学校", TokenizationMode::Character).tokens,
            ["他", "去", "学", "校"]
        );
        assert_eq!(
            tokenize("  a  b ", TokenizationMode::Whitespace).tokens,
            ["a", "b"]
        );
        assert!(tokenize("", TokenizationMode::Character).is_empty());
    }

    #[test]
    fn cjk_languages_use_character_mode() {
        assert_eq!(TokenizationMode::for_language("zh"), TokenizationMode::Character);
        assert_eq!(
            TokenizationMode::for_language("zh-CN"),
            TokenizationMode::Character
        );
        assert_eq!(TokenizationMode::for_language("de"), TokenizationMode::Whitespace);
    }

    fn n_tokens(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn length_bounds_are_inclusive() {
        let samples: Vec<Sample> = [9, 10, 60, 61]
            .iter()
            .map(|&n| Sample::new(format!("c:{n}"), n_tokens(n), n_tokens(n), "en"))
            .collect();
        let kept = filter_samples(&samples, &LengthFilter::default(), 0);
        let ids: Vec<_> = kept.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["c:10", "c:60"]);
    }

    #[test]
    fn cap_subsamples_deterministically_in_order() {
        let samples: Vec<Sample> = (0..30_000)
            .map(|i| Sample::new(format!("c:{i}"), n_tokens(12), n_tokens(12), "en"))
            .collect();
        let f = LengthFilter::default();
        let a = filter_samples(&samples, &f, 7);
        let b = filter_samples(&samples, &f, 7);
        assert_eq!(a.len(), 25_000);
        assert_eq!(a, b);
        let pos: Vec<usize> = a.iter().map(|s| s.id[2..].parse::<usize>().unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, filter_samples(&samples, &f, 8));
    }

    #[test]
    fn split_examples() {
        let (err, ok) = split_by_correctness(&[
            sample("He go .", "He goes ."),
            sample("Fine .", "Fine ."),
            sample("a  b", "a b"),
        ]);
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].input_text, "He go .");
        assert_eq!(ok.len(), 2);
    }

    #[test]
    fn nfc_equivalent_pair_is_correct() {
        // "é" precomposed vs e + combining acute
        assert!(!sample("caf\u{e9}", "cafe\u{301}").is_erroneous());
    }

    fn arb_sample() -> impl Strategy<Value = Sample> {
        (0usize..20, "[a-c ]{1,12}", "[a-c ]{1,12}").prop_map(|(n, x, y)| {
            Sample::new(
                "p",
                format!("{} {x}", n_tokens(n)),
                format!("{} {y}", n_tokens(n)),
                "en",
            )
        })
    }

    proptest! {
        #[test]
        fn split_is_a_partition(samples in prop::collection::vec(arb_sample(), 0..40)) {
            let (err, ok) = split_by_correctness(&samples);
            prop_assert_eq!(err.len() + ok.len(), samples.len());
            prop_assert!(err.iter().all(Sample::is_erroneous));
            prop_assert!(ok.iter().all(|s| !s.is_erroneous()));
        }

        #[test]
        fn filter_is_idempotent(samples in prop::collection::vec(arb_sample(), 0..60), cap in 0usize..30, seed: u64) {
            let f = LengthFilter { min_tokens: 3, max_tokens: 15, cap };
            let once = filter_samples(&samples, &f, seed);
            prop_assert_eq!(filter_samples(&once, &f, seed), once);
        }

        #[test]
        fn whitespace_tokenize_join_fixed_point(text in "\\PC{0,40}") {
            let once = tokenize(&text, TokenizationMode::Whitespace);
            let again = tokenize(&once.join(), TokenizationMode::Whitespace);
            prop_assert_eq!(once, again);
        }

        #[test]
        fn m2_round_trip(blocks in prop::collection::vec(
            (prop::collection::vec("[a-z]{1,5}", 1..8),
             prop::collection::btree_map(0u32..3, prop::collection::vec((0usize..8, 0usize..3, "[a-z]{0,4}"), 0..3), 1..3)),
            0..5)) {
            let samples: Vec<GoldAnnotatedSample> = blocks.into_iter().map(|(toks, ann)| {
                let n = toks.len();
                let annotations = ann.into_iter().map(|(id, edits)| {
                    let edits = edits.into_iter().map(|(s, len, r)| {
                        let start = s.min(n);
                        GoldAnnotation { start, end: (start + len).min(n), replacement: r, type_label: "R:X".into() }
                    }).collect();
                    (id, edits)
                }).collect();
                GoldAnnotatedSample { source_text: toks.join(" "), annotations }
            }).collect();
            let text = serialize_m2(&samples);
            let parsed = parse_m2(text.as_bytes()).unwrap();
            prop_assert_eq!(&parsed, &samples);
            prop_assert_eq!(serialize_m2(&parsed), text);
        }
    }
}
