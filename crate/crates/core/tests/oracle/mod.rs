//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the retrieval or scoring code it checks.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use gee_core::corpus::Sample;
use gee_core::database::{DbEntry, DbKind, ManifestInfo, SampleDatabase};
use gee_core::embed::{Embedder, EmbeddingVector, HashedNgramEmbedder};
use rand::seq::IndexedRandom;
use rand::Rng;

#[rustfmt::skip]
pub const WORDS: [&str; 24] = [
    "the", "cat", "dog", "go", "goes", "went", "school", "home", "a", "an", "apple", "is", "are",
    "verb", "tense", "article", "missing", "plural", "noun", "spelling", "error", "he", "they",
    "yesterday",
];

/// Plain O(nm) edit distance with unit substitution, insertion and deletion.
pub fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn top_k(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Scores every key vector against `query` and keeps the best `k`.
pub fn brute_knn(db: &SampleDatabase, query: &EmbeddingVector, k: usize) -> Vec<(String, f64)> {
    let scored = db
        .entries()
        .iter()
        .map(|e| (e.sample.id.clone(), cosine(query.values(), e.key_vector.values())))
        .collect();
    top_k(scored, k)
}

fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}

/// Okapi BM25 (k1 = 1.2, b = 0.75, idf = ln(1 + (N - df + 0.5) / (df + 0.5)))
/// over ASCII word keys, computed document by document.
pub fn brute_bm25(docs: &[(String, String)], query: &str, k: usize) -> Vec<(String, f64)> {
    let (k1, b) = (1.2, 0.75);
    let tokenized: Vec<Vec<String>> = docs.iter().map(|(_, t)| terms(t)).collect();
    let n = docs.len() as f64;
    let avgdl = tokenized.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let mut q = terms(query);
    let mut seen = HashSet::new();
    q.retain(|t| seen.insert(t.clone()));
    let mut scored = Vec::new();
    for ((id, _), doc) in docs.iter().zip(&tokenized) {
        let mut s = 0.0;
        let mut hit = false;
        for t in &q {
            let tf = doc.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            hit = true;
            let df = tokenized.iter().filter(|d| d.contains(t)).count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avgdl));
        }
        if hit {
            scored.push((id.clone(), s));
        }
    }
    top_k(scored, k)
}

/// Equal ids, order and scores, except that two positions may swap when
/// their scores agree to within `tol`.
pub fn assert_ranked_eq(got: &[(String, f64)], want: &[(String, f64)], tol: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("got {} hits, oracle {}", got.len(), want.len()));
    }
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        if (g.1 - w.1).abs() > tol {
            return Err(format!("rank {}: score {} vs oracle {}", i + 1, g.1, w.1));
        }
        if g.0 != w.0 {
            let near: HashMap<&str, f64> = want.iter().map(|(id, s)| (id.as_str(), *s)).collect();
            match near.get(g.0.as_str()) {
                Some(s) if (s - w.1).abs() <= tol => {}
                _ => return Err(format!("rank {}: id {} vs oracle {}", i + 1, g.0, w.0)),
            }
        }
    }
    Ok(())
}

pub fn random_sentence(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

/// A database of `n` entries with random word keys. Duplicated keys occur on
/// purpose so that ties are exercised.
pub fn random_db(rng: &mut impl Rng, kind: DbKind, n: usize) -> SampleDatabase {
    let embedder = HashedNgramEmbedder::default();
    let mut keys: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        let key = if !keys.is_empty() && rng.random_bool(0.1) {
            keys[rng.random_range(0..keys.len())].clone()
        } else {
            random_sentence(rng, 2, 10)
        };
        keys.push(key);
    }
    let entries = keys
        .into_iter()
        .enumerate()
        .map(|(i, key)| {
            let (input, corrected) = match kind {
                DbKind::Correct => (key.clone(), key.clone()),
                DbKind::Erroneous => (format!("{key} x{i}"), format!("{key} y{i}")),
            };
            DbEntry {
                sample: Sample::new(format!("r:{i:05}"), input.clone(), corrected, "en"),
                key_vector: embedder.embed(&key).unwrap(),
                input_vector: (kind == DbKind::Erroneous).then(|| embedder.embed(&input).unwrap()),
                key_text: key,
            }
        })
        .collect();
    SampleDatabase::new(
        kind,
        entries,
        ManifestInfo {
            embedder_id: embedder.id().into(),
            corpus_name: "random".into(),
            language: "en".into(),
            ..Default::default()
        },
    )
    .unwrap()
}

/// One demonstration or test stanza of a few-shot prompt, in line order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stanza {
    pub input: String,
    pub output: Option<String>,
    pub explanation: Option<String>,
    /// Line kinds in order: 'i' input, 'o' output, 'e' explanation.
    pub layout: String,
}

/// Splits a prompt into stanzas by its tag lines, checking each is well nested.
pub fn parse_stanzas(prompt: &str) -> Result<Vec<Stanza>, String> {
    const IN: (&str, &str) = ("<erroneous sentence>", "</erroneous sentence>");
    const OUT: (&str, &str) = ("<corrected sentence>", "</corrected sentence>");
    const EXP: (&str, &str) = ("<explanation>", "</explanation>");
    let inner = |line: &str, tags: (&str, &str)| -> Option<String> {
        line.strip_prefix(tags.0)?.strip_suffix(tags.1).map(str::to_owned)
    };
    let mut stanzas: Vec<Stanza> = Vec::new();
    let lines: Vec<&str> = prompt.lines().collect();
    for (n, line) in lines.iter().enumerate() {
        if let Some(x) = inner(line, IN) {
            stanzas.push(Stanza {
                input: x,
                output: None,
                explanation: None,
                layout: "i".into(),
            });
        } else if line.starts_with(IN.0) {
            return Err(format!("line {}: unclosed input tag", n + 1));
        } else if let Some(s) = stanzas.last_mut() {
            if let Some(y) = inner(line, OUT) {
                s.output = Some(y);
                s.layout.push('o');
            } else if let Some(e) = inner(line, EXP) {
                s.explanation = Some(e);
                s.layout.push('e');
            } else if *line == OUT.0 && n + 1 == lines.len() {
                s.layout.push('o');
            } else if line.starts_with(OUT.0) || line.starts_with(EXP.0) {
                return Err(format!("line {}: malformed tag line `{line}`", n + 1));
            }
        }
    }
    Ok(stanzas)
}

/// Smallest integer counts whose precision and recall are exactly `p` and `r`
/// (both given as percentages with two decimals).
pub fn counts_for(p: f64, r: f64) -> (usize, usize, usize) {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let reduce = |x: f64| {
        let num = (x * 100.0).round() as u64;
        let g = gcd(num, 10_000);
        (num / g, 10_000 / g)
    };
    let (pa, pb) = reduce(p);
    let (ra, rb) = reduce(r);
    let tp = pa / gcd(pa, ra) * ra;
    let fp = tp / pa * (pb - pa);
    let fn_ = tp / ra * (rb - ra);
    (tp as usize, fp as usize, fn_ as usize)
}
