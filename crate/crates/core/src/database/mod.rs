//! The dual sample database: erroneous samples keyed by their explanation,
//! correct samples keyed by their input text. Both are searchable by exact
//! cosine kNN, BM25, or seeded random draw.

pub mod bm25;
mod build;
mod store;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::embed::{Embedder, EmbeddingVector};
use crate::error::{Error, Result};

pub use bm25::Bm25Index;
pub use build::{
    build_database, format_edit_lines, generate_explanation, generate_explanation_with_edits, BuildConfig,
    BuildReport, ExplainedSample, ExplanationFailure, SampleFailure,
};
pub use store::{load, load_pair, persist, persist_pair, FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DbKind {
    Erroneous,
    Correct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub sample: Sample,
    pub key_text: String,
    pub key_vector: EmbeddingVector,
    /// Embedding of the input text. Erroneous entries carry it; correct
    /// entries are keyed by their input, so `key_vector` already is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_vector: Option<EmbeddingVector>,
}

impl DbEntry {
    /// The vector compared against input-text queries.
    pub fn input_embedding(&self) -> &EmbeddingVector {
        self.input_vector.as_ref().unwrap_or(&self.key_vector)
    }
}

/// Which text of an entry a query is matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchField {
    /// The database key: the explanation for erroneous entries.
    Key,
    /// The sample's input text.
    Input,
}

/// Build metadata stored next to the entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: DbKind,
    pub teacher_model: Option<String>,
    pub teacher_backend: Option<String>,
    pub embedder_id: String,
    pub corpus_name: String,
    pub language: String,
    pub built_at: u64,
    pub count: usize,
    pub dimension: usize,
    pub entries_sha256: String,
}

/// Provenance fields the builder supplies; counts and checksum are derived.
#[derive(Debug, Clone, Default)]
pub struct ManifestInfo {
    pub teacher_model: Option<String>,
    pub teacher_backend: Option<String>,
    pub embedder_id: String,
    pub corpus_name: String,
    pub language: String,
    pub built_at: u64,
}

#[derive(Debug, Clone)]
pub struct SampleDatabase {
    entries: Vec<DbEntry>,
    bm25: Bm25Index,
    /// Present only when keys are not the input texts.
    input_bm25: Option<Bm25Index>,
    manifest: Manifest,
}

impl PartialEq for SampleDatabase {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.manifest == other.manifest
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample: Sample,
    pub key_text: String,
    pub score: f64,
    pub rank: usize,
}

/// Result of one query plus anything the caller should know about it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QueryHits {
    pub hits: Vec<ScoredSample>,
    /// Fewer than `k` results could be returned.
    pub short: bool,
    pub warnings: Vec<String>,
}

impl SampleDatabase {
    /// Validates key discipline, id uniqueness and vector dimensions, then
    /// indexes the key texts.
    pub fn new(kind: DbKind, mut entries: Vec<DbEntry>, info: ManifestInfo) -> Result<Self> {
        if kind == DbKind::Correct {
            for e in &mut entries {
                e.input_vector = None;
            }
        }
        let mut ids = HashSet::new();
        let dimension = entries.first().map_or(0, |e| e.key_vector.dimension());
        for e in &entries {
            if !ids.insert(e.sample.id.as_str()) {
                return Err(Error::Corruption(format!("duplicate entry id `{}`", e.sample.id)));
            }
            if e.key_vector.dimension() != dimension {
                return Err(Error::Corruption(format!(
                    "entry `{}` has dimension {}, expected {dimension}",
                    e.sample.id,
                    e.key_vector.dimension()
                )));
            }
            if kind == DbKind::Erroneous {
                match &e.input_vector {
                    None => {
                        return Err(Error::Corruption(format!(
                            "erroneous entry `{}` has no input vector",
                            e.sample.id
                        )))
                    }
                    Some(v) if v.dimension() != dimension => {
                        return Err(Error::Corruption(format!(
                            "entry `{}` has input dimension {}, expected {dimension}",
                            e.sample.id,
                            v.dimension()
                        )))
                    }
                    Some(_) => {}
                }
            }
            if kind == DbKind::Correct && e.key_text != e.sample.input_text {
                return Err(Error::Corruption(format!(
                    "correct entry `{}` must be keyed by its input text",
                    e.sample.id
                )));
            }
            if e.key_text.trim().is_empty() {
                return Err(Error::Corruption(format!(
                    "entry `{}` has an empty key",
                    e.sample.id
                )));
            }
        }
        let entries_sha256 = crate::llm::sha256_hex(&store::entries_jsonl(&entries)?);
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind,
            teacher_model: info.teacher_model,
            teacher_backend: info.teacher_backend,
            embedder_id: info.embedder_id,
            corpus_name: info.corpus_name,
            language: info.language,
            built_at: info.built_at,
            count: entries.len(),
            dimension,
            entries_sha256,
        };
        Ok(Self::from_parts(entries, manifest))
    }

    fn from_parts(entries: Vec<DbEntry>, manifest: Manifest) -> Self {
        let bm25 = Bm25Index::build(entries.iter().map(|e| e.key_text.as_str()));
        let input_bm25 = (manifest.kind == DbKind::Erroneous)
            .then(|| Bm25Index::build(entries.iter().map(|e| e.sample.input_text.as_str())));
        Self {
            entries,
            bm25,
            input_bm25,
            manifest,
        }
    }

    pub fn kind(&self) -> DbKind {
        self.manifest.kind
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bm25_index(&self) -> &Bm25Index {
        &self.bm25
    }

    /// Orders `(entry, score)` pairs by descending score, then ascending id,
    /// drops excluded entries, and keeps the first `k`.
    fn rank(&self, mut scored: Vec<(usize, f64)>, k: usize, exclude: &dyn Fn(&Sample) -> bool) -> QueryHits {
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.entries[a.0].sample.id.cmp(&self.entries[b.0].sample.id))
        });
        let hits: Vec<ScoredSample> = scored
            .into_iter()
            .filter(|(i, _)| !exclude(&self.entries[*i].sample))
            .take(k)
            .enumerate()
            .map(|(r, (i, score))| ScoredSample {
                sample: self.entries[i].sample.clone(),
                key_text: self.entries[i].key_text.clone(),
                score,
                rank: r + 1,
            })
            .collect();
        QueryHits {
            short: hits.len() < k,
            hits,
            warnings: Vec::new(),
        }
    }

    pub fn knn_query(&self, query_text: &str, k: usize, embedder: &dyn Embedder) -> Result<QueryHits> {
        self.knn_query_excluding(query_text, k, embedder, &|_| false)
    }

    /// Exact cosine kNN over every key.
    pub fn knn_query_excluding(
        &self,
        query_text: &str,
        k: usize,
        embedder: &dyn Embedder,
        exclude: &dyn Fn(&Sample) -> bool,
    ) -> Result<QueryHits> {
        self.knn_query_on(SearchField::Key, query_text, k, embedder, exclude)
    }

    /// Exact cosine kNN over every entry's key or input vector.
    pub fn knn_query_on(
        &self,
        field: SearchField,
        query_text: &str,
        k: usize,
        embedder: &dyn Embedder,
        exclude: &dyn Fn(&Sample) -> bool,
    ) -> Result<QueryHits> {
        if k == 0 {
            return Ok(QueryHits::default());
        }
        let query = embedder.embed(query_text)?;
        if !self.entries.is_empty() && query.dimension() != self.manifest.dimension {
            return Err(Error::Embedding(format!(
                "query dimension {} does not match database dimension {}",
                query.dimension(),
                self.manifest.dimension
            )));
        }
        let scored = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let v = match field {
                    SearchField::Key => &e.key_vector,
                    SearchField::Input => e.input_embedding(),
                };
                (i, query.cosine(v))
            })
            .collect();
        let mut hits = self.rank(scored, k, exclude);
        if embedder.id() != self.manifest.embedder_id {
            hits.warnings.push(format!(
                "query embedder `{}` differs from database embedder `{}`",
                embedder.id(),
                self.manifest.embedder_id
            ));
        }
        Ok(hits)
    }

    pub fn bm25_query(&self, query_text: &str, k: usize) -> QueryHits {
        self.bm25_query_excluding(query_text, k, &|_| false)
    }

    /// BM25 over tokenized key texts; entries without term overlap never appear.
    pub fn bm25_query_excluding(
        &self,
        query_text: &str,
        k: usize,
        exclude: &dyn Fn(&Sample) -> bool,
    ) -> QueryHits {
        self.bm25_query_on(SearchField::Key, query_text, k, exclude)
    }

    /// BM25 over the tokenized keys or input texts.
    pub fn bm25_query_on(
        &self,
        field: SearchField,
        query_text: &str,
        k: usize,
        exclude: &dyn Fn(&Sample) -> bool,
    ) -> QueryHits {
        if k == 0 {
            return QueryHits::default();
        }
        let index = match field {
            SearchField::Key => &self.bm25,
            SearchField::Input => self.input_bm25.as_ref().unwrap_or(&self.bm25),
        };
        self.rank(index.score_all(query_text), k, exclude)
    }

    pub fn random_select(&self, k: usize, seed: u64) -> QueryHits {
        self.random_select_excluding(k, seed, &|_| false)
    }

    /// Uniform draw without replacement; every score is 0.
    pub fn random_select_excluding(
        &self,
        k: usize,
        seed: u64,
        exclude: &dyn Fn(&Sample) -> bool,
    ) -> QueryHits {
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let hits: Vec<ScoredSample> = order
            .into_iter()
            .filter(|&i| !exclude(&self.entries[i].sample))
            .take(k)
            .enumerate()
            .map(|(r, i)| ScoredSample {
                sample: self.entries[i].sample.clone(),
                key_text: self.entries[i].key_text.clone(),
                score: 0.0,
                rank: r + 1,
            })
            .collect();
        QueryHits {
            short: hits.len() < k,
            hits,
            warnings: Vec::new(),
        }
    }
}

/// Both halves of a built database.
#[derive(Debug, Clone, PartialEq)]
pub struct DatabasePair {
    pub erroneous: SampleDatabase,
    pub correct: SampleDatabase,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashedNgramEmbedder;

    pub(crate) fn db_of(kind: DbKind, keys: &[(&str, &str)]) -> SampleDatabase {
        let e = HashedNgramEmbedder::default();
        let entries = keys
            .iter()
            .enumerate()
            .map(|(i, (key, input))| DbEntry {
                sample: Sample::new(format!("d:{i:03}"), *input, format!("{input}!"), "en"),
                key_text: key.to_string(),
                key_vector: e.embed(key).unwrap(),
                input_vector: Some(e.embed(input).unwrap_or_else(|_| e.embed(key).unwrap())),
            })
            .collect();
        SampleDatabase::new(
            kind,
            entries,
            ManifestInfo {
                embedder_id: e.id().into(),
                corpus_name: "t".into(),
                language: "en".into(),
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn self_match_ranks_first() {
        let db = db_of(
            DbKind::Erroneous,
            &[
                ("verb agreement error", "a"),
                ("missing article", "b"),
                ("wrong tense used", "c"),
            ],
        );
        let e = HashedNgramEmbedder::default();
        let hits = db.knn_query("missing article", 2, &e).unwrap().hits;
        assert_eq!(hits[0].key_text, "missing article");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits[0].rank, 1);
        assert_eq!(hits[1].rank, 2);
        assert!(db.knn_query("missing article", 0, &e).unwrap().hits.is_empty());
    }

    #[test]
    fn k_beyond_size_returns_all_and_flags() {
        let db = db_of(DbKind::Erroneous, &[("aa bb", "a"), ("cc dd", "b")]);
        let h = db.knn_query("aa", 10, &HashedNgramEmbedder::default()).unwrap();
        assert_eq!(h.hits.len(), 2);
        assert!(h.short);
    }

    #[test]
    fn duplicate_keys_tie_break_by_id() {
        let db = db_of(
            DbKind::Erroneous,
            &[("same key", "x"), ("other", "y"), ("same key", "z")],
        );
        let ids: Vec<_> = db
            .knn_query("same key", 2, &HashedNgramEmbedder::default())
            .unwrap()
            .hits
            .into_iter()
            .map(|h| h.sample.id)
            .collect();
        assert_eq!(ids, ["d:000", "d:002"]);
        let bm: Vec<_> = db
            .bm25_query("same", 3)
            .hits
            .into_iter()
            .map(|h| h.sample.id)
            .collect();
        assert_eq!(bm, ["d:000", "d:002"]);
    }

    #[test]
    fn bm25_no_overlap_is_empty() {
        let db = db_of(DbKind::Erroneous, &[("verb agreement", "a")]);
        assert!(db.bm25_query("spelling", 4).hits.is_empty());
        assert!(db.bm25_query("", 4).hits.is_empty());
        let h = db.bm25_query("verb", 4);
        assert_eq!(h.hits.len(), 1);
        assert!(h.hits[0].score > 0.0);
    }

    #[test]
    fn random_is_seeded_and_exhaustive() {
        let keys: Vec<(String, String)> = (0..8).map(|i| (format!("key {i}"), format!("in {i}"))).collect();
        let refs: Vec<(&str, &str)> = keys.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let db = db_of(DbKind::Erroneous, &refs);
        assert_eq!(db.random_select(3, 9), db.random_select(3, 9));
        let all = db.random_select(8, 1).hits;
        let mut ids: Vec<_> = all.iter().map(|h| h.sample.id.clone()).collect();
        assert!(all.iter().all(|h| h.score == 0.0));
        ids.sort();
        assert_eq!(ids.len(), 8);
        ids.dedup();
        assert_eq!(ids.len(), 8);
        assert_eq!(db.random_select(20, 1).hits.len(), 8);
    }

    #[test]
    fn random_k1_is_uniform() {
        let db = db_of(
            DbKind::Erroneous,
            &[("k0", "a"), ("k1", "b"), ("k2", "c"), ("k3", "d"), ("k4", "e")],
        );
        let mut freq = std::collections::HashMap::new();
        let trials = 10_000;
        for seed in 0..trials {
            *freq
                .entry(db.random_select(1, seed).hits[0].sample.id.clone())
                .or_insert(0usize) += 1;
        }
        assert_eq!(freq.len(), 5);
        for (id, n) in freq {
            let f = n as f64 / trials as f64;
            assert!((f - 0.2).abs() <= 0.02, "{id}: {f}");
        }
    }

    #[test]
    fn correct_db_rejects_foreign_keys() {
        let e = HashedNgramEmbedder::default();
        let entry = DbEntry {
            sample: Sample::new("c:1", "Fine .", "Fine .", "en"),
            key_text: "an explanation".into(),
            key_vector: e.embed("an explanation").unwrap(),
            input_vector: None,
        };
        assert!(SampleDatabase::new(DbKind::Correct, vec![entry], ManifestInfo::default()).is_err());
    }

    #[test]
    fn erroneous_entries_need_input_vectors() {
        let e = HashedNgramEmbedder::default();
        let entry = DbEntry {
            sample: Sample::new("e:1", "He go .", "He goes .", "en"),
            key_text: "verb agreement".into(),
            key_vector: e.embed("verb agreement").unwrap(),
            input_vector: None,
        };
        assert!(SampleDatabase::new(DbKind::Erroneous, vec![entry], ManifestInfo::default()).is_err());
    }

    #[test]
    fn input_field_matches_inputs_not_keys() {
        let e = HashedNgramEmbedder::default();
        let db = db_of(
            DbKind::Erroneous,
            &[
                ("the cat sat on the mat", "verb tense error here"),
                ("verb tense error here", "the cat sat on the mat"),
            ],
        );
        let by_key = db.knn_query("the cat sat on the mat", 1, &e).unwrap();
        assert_eq!(by_key.hits[0].sample.id, "d:000");
        let by_input = db
            .knn_query_on(SearchField::Input, "the cat sat on the mat", 1, &e, &|_| false)
            .unwrap();
        assert_eq!(by_input.hits[0].sample.id, "d:001");
        assert_eq!(by_input.hits[0].key_text, "verb tense error here");
        let bm = db.bm25_query_on(SearchField::Input, "cat mat", 1, &|_| false);
        assert_eq!(bm.hits[0].sample.id, "d:001");
    }

    #[test]
    fn embedder_mismatch_warns() {
        struct Other(HashedNgramEmbedder);
        impl Embedder for Other {
            fn id(&self) -> &str {
                "other"
            }
            fn embed(&self, t: &str) -> Result<EmbeddingVector> {
                self.0.embed(t)
            }
        }
        let db = db_of(DbKind::Erroneous, &[("aa bb", "a")]);
        let h = db
            .knn_query("aa bb", 1, &Other(HashedNgramEmbedder::default()))
            .unwrap();
        assert_eq!(h.warnings.len(), 1);
    }
}
