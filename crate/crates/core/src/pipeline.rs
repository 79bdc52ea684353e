//! Prediction-time procedure: detect, retrieve from both databases, assemble
//! the few-shot prompt, correct. Also the k_C sweep used for ablations.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_text, GoldAnnotatedSample, Sample, TokenizationMode};
use crate::database::{DatabasePair, Manifest, QueryHits, SampleDatabase, SearchField};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, ScoreReport};
use crate::llm::template::{substitute, DETECTION_DETAILED, DETECTION_SHORT, FEW_SHOT};
use crate::llm::{BackendError, LlmClient, PromptCatalog, ANALYSIS_MAX_TOKENS, CORRECTION_MAX_TOKENS};

/// Explanation text used for correct demos when explanations are shown.
pub const NO_ERROR_EXPLANATION: &str = "No error in text";

const CLOSE_CORRECTED: &str = "</corrected sentence>";
const OPEN_CORRECTED: &str = "<corrected sentence>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Explanation,
    Semantic,
    Bm25,
    Random,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Explanation => "explanation",
            Strategy::Semantic => "semantic",
            Strategy::Bm25 => "bm25",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explanation" => Ok(Strategy::Explanation),
            "semantic" => Ok(Strategy::Semantic),
            "bm25" => Ok(Strategy::Bm25),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected explanation, semantic, bm25 or random)"
            ))),
        }
    }
}

/// Where demo explanations go: nowhere, between input and output, or after output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplanationMode {
    #[default]
    None,
    Pre,
    Post,
}

impl fmt::Display for ExplanationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExplanationMode::None => "none",
            ExplanationMode::Pre => "pre",
            ExplanationMode::Post => "post",
        })
    }
}

impl FromStr for ExplanationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ExplanationMode::None),
            "pre" => Ok(ExplanationMode::Pre),
            "post" => Ok(ExplanationMode::Post),
            other => Err(Error::Config(format!(
                "unknown explanation mode `{other}` (expected none, pre or post)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub k_e: usize,
    pub k_c: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub explanation_mode: ExplanationMode,
    pub predictor_model: String,
    pub detection_template: String,
    /// Match the detection output against explanation keys with BM25 instead of kNN.
    pub explanation_bm25: bool,
    pub language: String,
    /// Keep database entries whose input equals the test sentence.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub include_source_matches: bool,
    /// Worker threads; 0 uses rayon's default.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_e: 4,
            k_c: 4,
            strategy: Strategy::Explanation,
            seed: 42,
            explanation_mode: ExplanationMode::None,
            predictor_model: String::new(),
            detection_template: DETECTION_DETAILED.to_owned(),
            explanation_bm25: false,
            language: "en".to_owned(),
            include_source_matches: false,
            jobs: 0,
        }
    }
}

impl RunConfig {
    /// Detection runs for the explanation strategy, and for `pre` mode where
    /// the test stanza carries its own explanation.
    pub fn needs_detection(&self) -> bool {
        self.strategy == Strategy::Explanation || self.explanation_mode == ExplanationMode::Pre
    }

    pub fn validate(&self, catalog: &PromptCatalog) -> Result<()> {
        catalog.get(FEW_SHOT)?;
        if self.needs_detection() {
            if self.detection_template.is_empty() {
                return Err(Error::Config(
                    "explanation strategy requires a detection template".into(),
                ));
            }
            if ![DETECTION_DETAILED, DETECTION_SHORT].contains(&self.detection_template.as_str()) {
                log::info!("using custom detection template `{}`", self.detection_template);
            }
            let t = catalog.get(&self.detection_template)?;
            if !t.required_placeholders.contains("source") {
                return Err(Error::Template {
                    name: t.name.clone(),
                    message: "detection template must contain {source}".into(),
                });
            }
        }
        Ok(())
    }

    /// Hash of the canonical config JSON.
    pub fn lineage_id(&self) -> String {
        crate::llm::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub source: String,
    /// Raw predictor output, verbatim.
    pub initial_explanation: String,
}

impl DetectionResult {
    pub fn is_empty(&self) -> bool {
        self.initial_explanation.trim().is_empty()
    }
}

/// Renders the detection template with `{source}` and returns the raw reply.
pub fn detect(
    predictor: &LlmClient,
    catalog: &PromptCatalog,
    source: &str,
    template_name: &str,
) -> Result<DetectionResult> {
    if source.trim().is_empty() {
        return Err(Error::Config("cannot run detection on an empty source".into()));
    }
    let prompt = catalog
        .get(template_name)?
        .render(&HashMap::from([("source", source)]))?;
    let response = predictor.complete_prompt(&prompt, ANALYSIS_MAX_TOKENS)?;
    Ok(DetectionResult {
        source: source.to_owned(),
        initial_explanation: response.text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DemoRole {
    Err,
    Corr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Knn,
    Bm25,
    Random,
}

/// The query one side of retrieval actually ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub mechanism: Mechanism,
    /// What the query was matched against; `None` for random selection.
    pub field: Option<SearchField>,
    /// `None` for random selection.
    pub text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoProvenance {
    pub id: String,
    pub role: DemoRole,
    pub strategy: Strategy,
    pub score: f64,
    pub rank: usize,
    pub key_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationSet {
    pub erroneous: Vec<Sample>,
    pub correct: Vec<Sample>,
    /// One record per demo, erroneous first, in prompt order.
    pub provenance: Vec<DemoProvenance>,
    pub erroneous_query: QueryRecord,
    pub correct_query: QueryRecord,
    pub flags: Vec<String>,
    pub warnings: Vec<String>,
}

impl DemonstrationSet {
    pub fn len(&self) -> usize {
        self.erroneous.len() + self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything retrieval and prediction need besides the databases.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub predictor: &'a LlmClient,
    pub embedder: &'a dyn Embedder,
    pub catalog: &'a PromptCatalog,
}

/// Independent per-item, per-side seeds so items do not share random draws.
pub fn item_seed(seed: u64, index: usize, side: u64) -> u64 {
    let mut z = seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(side.wrapping_mul(0xD1B5_4A32_D192_ED03));
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[allow(clippy::too_many_arguments)]
fn run_query(
    db: &SampleDatabase,
    mechanism: Mechanism,
    field: SearchField,
    text: &str,
    k: usize,
    seed: u64,
    embedder: &dyn Embedder,
    exclude: &dyn Fn(&Sample) -> bool,
) -> Result<QueryHits> {
    match mechanism {
        Mechanism::Knn => db.knn_query_on(field, text, k, embedder, exclude),
        Mechanism::Bm25 => Ok(db.bm25_query_on(field, text, k, exclude)),
        Mechanism::Random => Ok(db.random_select_excluding(k, seed, exclude)),
    }
}

/// Retrieves `k_E` erroneous and `k_C` correct demonstrations for `source`.
/// The explanation strategy matches the detection output against explanation
/// keys; every other query matches the source against sample inputs. Entries
/// whose input equals the source are skipped unless the config keeps them.
pub fn retrieve_demonstrations(
    dbs: &DatabasePair,
    source: &str,
    detection: Option<&DetectionResult>,
    config: &RunConfig,
    embedder: &dyn Embedder,
    index: usize,
) -> Result<DemonstrationSet> {
    let mut flags = Vec::new();
    let normalized_source = normalize_text(source);
    let keep_matches = config.include_source_matches;
    let exclude = |s: &Sample| !keep_matches && normalize_text(&s.input_text) == normalized_source;

    let (err_mechanism, err_field, err_text, err_strategy) = match config.strategy {
        Strategy::Explanation => match detection {
            Some(d) if !d.is_empty() => {
                let m = if config.explanation_bm25 {
                    Mechanism::Bm25
                } else {
                    Mechanism::Knn
                };
                (
                    m,
                    SearchField::Key,
                    Some(d.initial_explanation.clone()),
                    Strategy::Explanation,
                )
            }
            Some(_) => {
                log::warn!("item {index}: empty detection output, falling back to semantic retrieval");
                flags.push("detection_empty_semantic_fallback".to_owned());
                (
                    Mechanism::Knn,
                    SearchField::Input,
                    Some(source.to_owned()),
                    Strategy::Semantic,
                )
            }
            None => {
                return Err(Error::Config(
                    "explanation strategy requires a detection result".into(),
                ))
            }
        },
        Strategy::Semantic => (
            Mechanism::Knn,
            SearchField::Input,
            Some(source.to_owned()),
            Strategy::Semantic,
        ),
        Strategy::Bm25 => (
            Mechanism::Bm25,
            SearchField::Input,
            Some(source.to_owned()),
            Strategy::Bm25,
        ),
        Strategy::Random => (Mechanism::Random, SearchField::Input, None, Strategy::Random),
    };
    let corr_mechanism = match config.strategy {
        Strategy::Explanation | Strategy::Semantic => Mechanism::Knn,
        Strategy::Bm25 => Mechanism::Bm25,
        Strategy::Random => Mechanism::Random,
    };
    let corr_text = (corr_mechanism != Mechanism::Random).then(|| source.to_owned());

    let err_hits = run_query(
        &dbs.erroneous,
        err_mechanism,
        err_field,
        err_text.as_deref().unwrap_or(""),
        config.k_e,
        item_seed(config.seed, index, 0),
        embedder,
        &exclude,
    )?;
    let corr_hits = run_query(
        &dbs.correct,
        corr_mechanism,
        SearchField::Input,
        corr_text.as_deref().unwrap_or(""),
        config.k_c,
        item_seed(config.seed, index, 1),
        embedder,
        &exclude,
    )?;
    if err_hits.short {
        flags.push(format!("erroneous_short:{}/{}", err_hits.hits.len(), config.k_e));
    }
    if corr_hits.short {
        flags.push(format!("correct_short:{}/{}", corr_hits.hits.len(), config.k_c));
    }

    let mut provenance = Vec::with_capacity(err_hits.hits.len() + corr_hits.hits.len());
    let mut warnings = err_hits.warnings;
    warnings.extend(corr_hits.warnings);
    let mut collect = |hits: Vec<crate::database::ScoredSample>, role, strategy| {
        hits.into_iter()
            .map(|h| {
                provenance.push(DemoProvenance {
                    id: h.sample.id.clone(),
                    role,
                    strategy,
                    score: h.score,
                    rank: h.rank,
                    key_text: h.key_text,
                });
                h.sample
            })
            .collect::<Vec<_>>()
    };
    let erroneous = collect(err_hits.hits, DemoRole::Err, err_strategy);
    let correct = collect(corr_hits.hits, DemoRole::Corr, config.strategy);
    Ok(DemonstrationSet {
        erroneous,
        correct,
        provenance,
        erroneous_query: QueryRecord {
            mechanism: err_mechanism,
            field: (err_mechanism != Mechanism::Random).then_some(err_field),
            text: err_text,
        },
        correct_query: QueryRecord {
            mechanism: corr_mechanism,
            field: (corr_mechanism != Mechanism::Random).then_some(SearchField::Input),
            text: corr_text,
        },
        flags,
        warnings,
    })
}

/// The few-shot template cut into its instruction block, one demo stanza
/// (the first `{text}` line and the line after it) and the test stanza
/// (from the `{source}` line to the end).
struct FewShotLayout<'t> {
    header: Vec<&'t str>,
    demo: [&'t str; 2],
    test: Vec<&'t str>,
}

fn few_shot_layout(body: &str) -> Result<FewShotLayout<'_>> {
    let lines: Vec<&str> = body.lines().collect();
    let bad = |message: &str| Error::Template {
        name: FEW_SHOT.to_owned(),
        message: message.to_owned(),
    };
    let first = lines
        .iter()
        .position(|l| l.contains("{text}"))
        .ok_or_else(|| bad("no {text} demo line"))?;
    let label = *lines
        .get(first + 1)
        .filter(|l| l.contains("{label}"))
        .ok_or_else(|| bad("the {text} line must be followed by a {label} line"))?;
    let test = lines
        .iter()
        .position(|l| l.contains("{source}"))
        .filter(|&t| t > first + 1)
        .ok_or_else(|| bad("no {source} line after the demo lines"))?;
    Ok(FewShotLayout {
        header: lines[..first].to_vec(),
        demo: [lines[first], label],
        test: lines[test..].to_vec(),
    })
}

fn explanation_line(text: &str) -> String {
    format!("<explanation>{text}</explanation>")
}

/// Instruction block, all erroneous demos, all correct demos, then the open
/// test stanza. `test_explanation` is shown before the open tag in `pre` mode.
pub fn assemble_prompt(
    catalog: &PromptCatalog,
    demos: &DemonstrationSet,
    source: &str,
    mode: ExplanationMode,
    test_explanation: Option<&str>,
) -> Result<String> {
    let layout = few_shot_layout(&catalog.get(FEW_SHOT)?.body)?;
    let mut lines: Vec<String> = layout.header.iter().map(|l| l.to_string()).collect();

    let explanations = demos.provenance.iter().map(|p| match p.role {
        DemoRole::Err => p.key_text.as_str(),
        DemoRole::Corr => NO_ERROR_EXPLANATION,
    });
    for (sample, explanation) in demos.erroneous.iter().chain(&demos.correct).zip(explanations) {
        let bindings = HashMap::from([
            ("text", sample.input_text.as_str()),
            ("label", sample.corrected_text.as_str()),
        ]);
        let input = substitute(layout.demo[0], &bindings);
        let output = substitute(layout.demo[1], &bindings);
        match mode {
            ExplanationMode::None => lines.extend([input, output]),
            ExplanationMode::Pre => lines.extend([input, explanation_line(explanation), output]),
            ExplanationMode::Post => lines.extend([input, output, explanation_line(explanation)]),
        }
    }

    let bindings = HashMap::from([("source", source)]);
    let last = layout.test.len() - 1;
    for (i, line) in layout.test.iter().enumerate() {
        if i == last && mode == ExplanationMode::Pre {
            lines.push(explanation_line(test_explanation.unwrap_or("")));
        }
        lines.push(substitute(line, &bindings));
    }
    Ok(lines.join("\n"))
}

/// Extracts the corrected sentence from a model reply. Returns `None` when
/// nothing usable is found.
pub fn parse_hypothesis(response: &str) -> Option<String> {
    let strip_open = |s: &str| -> String {
        let s = s.trim();
        s.strip_prefix(OPEN_CORRECTED).unwrap_or(s).trim().to_owned()
    };
    let candidate = match response.find(CLOSE_CORRECTED) {
        Some(end) => strip_open(&response[..end]),
        None => response
            .lines()
            .map(strip_open)
            .find(|l| !l.is_empty())
            .unwrap_or_default(),
    };
    (!candidate.is_empty()).then_some(candidate)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correction {
    pub hypothesis: String,
    pub raw: String,
    pub copy_through: bool,
}

/// Sends the assembled prompt; falls back to the source when the reply
/// cannot be parsed.
pub fn predict(predictor: &LlmClient, prompt: &str, source: &str) -> Result<Correction, BackendError> {
    let raw = predictor.complete_prompt(prompt, CORRECTION_MAX_TOKENS)?.text;
    Ok(match parse_hypothesis(&raw) {
        Some(hypothesis) => Correction {
            hypothesis,
            raw,
            copy_through: false,
        },
        None => Correction {
            hypothesis: source.to_owned(),
            raw,
            copy_through: true,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub source: String,
    pub hypothesis: String,
    pub raw_response: String,
    pub prompt: String,
    pub demo_set: DemonstrationSet,
    pub detection: Option<DetectionResult>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub index: usize,
    pub source: String,
    pub stage: String,
    pub message: String,
}

pub type ItemOutcome = std::result::Result<Prediction, ItemFailure>;

fn process_item(
    index: usize,
    source: &str,
    dbs: &DatabasePair,
    config: &RunConfig,
    ctx: RunContext<'_>,
) -> ItemOutcome {
    let fail = |stage: &str, e: &dyn fmt::Display| ItemFailure {
        index,
        source: source.to_owned(),
        stage: stage.to_owned(),
        message: e.to_string(),
    };
    let detection = if config.needs_detection() {
        Some(
            detect(ctx.predictor, ctx.catalog, source, &config.detection_template)
                .map_err(|e| fail("detect", &e))?,
        )
    } else {
        None
    };
    let demos = retrieve_demonstrations(dbs, source, detection.as_ref(), config, ctx.embedder, index)
        .map_err(|e| fail("retrieve", &e))?;
    let prompt = assemble_prompt(
        ctx.catalog,
        &demos,
        source,
        config.explanation_mode,
        detection.as_ref().map(|d| d.initial_explanation.as_str()),
    )
    .map_err(|e| fail("assemble", &e))?;
    let correction = predict(ctx.predictor, &prompt, source).map_err(|e| fail("predict", &e))?;
    let mut flags = demos.flags.clone();
    if correction.copy_through {
        flags.push("copy_through".to_owned());
    }
    Ok(Prediction {
        index,
        source: source.to_owned(),
        hypothesis: correction.hypothesis,
        raw_response: correction.raw,
        prompt,
        demo_set: demos,
        detection,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseManifests {
    pub erroneous: Manifest,
    pub correct: Manifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub lineage_id: String,
    pub config: RunConfig,
    pub databases: DatabaseManifests,
    pub predictor_backend: String,
    pub predictor_model: String,
    pub embedder_id: String,
    pub cache: Option<CacheStats>,
    pub items: usize,
    pub failures: usize,
    pub wall_seconds: f64,
    pub warnings: Vec<String>,
    /// The caller's fully resolved configuration, echoed verbatim.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolved_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub outcomes: Vec<ItemOutcome>,
    pub manifest: RunManifest,
}

impl BatchOutput {
    pub fn failures(&self) -> impl Iterator<Item = &ItemFailure> {
        self.outcomes.iter().filter_map(|o| o.as_ref().err())
    }

    /// One hypothesis per item; failed items copy their source through.
    pub fn hypotheses(&self) -> Vec<String> {
        self.outcomes
            .iter()
            .map(|o| match o {
                Ok(p) => p.hypothesis.clone(),
                Err(f) => f.source.clone(),
            })
            .collect()
    }
}

pub fn run_batch(
    sources: &[String],
    dbs: &DatabasePair,
    config: &RunConfig,
    ctx: RunContext<'_>,
) -> Result<BatchOutput> {
    run_batch_with_lineage(sources, dbs, config, ctx, config.lineage_id())
}

fn run_batch_with_lineage(
    sources: &[String],
    dbs: &DatabasePair,
    config: &RunConfig,
    ctx: RunContext<'_>,
    lineage_id: String,
) -> Result<BatchOutput> {
    config.validate(ctx.catalog)?;
    let started = Instant::now();
    let mut warnings = BTreeSet::new();
    for db in [&dbs.erroneous, &dbs.correct] {
        let m = db.manifest();
        if m.language != config.language {
            warnings.insert(format!(
                "{:?} database language `{}` differs from run language `{}`",
                m.kind, m.language, config.language
            ));
        }
    }
    let cache_before = ctx.predictor.cache.as_ref().map(|c| (c.hits(), c.misses()));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<ItemOutcome> = pool.install(|| {
        sources
            .par_iter()
            .enumerate()
            .map(|(i, s)| process_item(i, s, dbs, config, ctx))
            .collect()
    });

    for o in &outcomes {
        match o {
            Ok(p) => warnings.extend(p.demo_set.warnings.iter().cloned()),
            Err(f) => log::warn!("item {} failed at {}: {}", f.index, f.stage, f.message),
        }
    }
    let cache = match (ctx.predictor.cache.as_ref(), cache_before) {
        (Some(c), Some((h0, m0))) => {
            let (hits, misses) = (c.hits() - h0, c.misses() - m0);
            let total = hits + misses;
            Some(CacheStats {
                hits,
                misses,
                hit_rate: if total == 0 {
                    0.0
                } else {
                    hits as f64 / total as f64
                },
            })
        }
        _ => None,
    };
    let manifest = RunManifest {
        lineage_id,
        config: config.clone(),
        databases: DatabaseManifests {
            erroneous: dbs.erroneous.manifest().clone(),
            correct: dbs.correct.manifest().clone(),
        },
        predictor_backend: ctx.predictor.backend_id().to_owned(),
        predictor_model: ctx.predictor.model.clone(),
        embedder_id: ctx.embedder.id().to_owned(),
        cache,
        items: outcomes.len(),
        failures: outcomes.iter().filter(|o| o.is_err()).count(),
        wall_seconds: crate::elapsed_seconds(started),
        warnings: warnings.into_iter().collect(),
        resolved_config: None,
    };
    Ok(BatchOutput { outcomes, manifest })
}

#[derive(Serialize)]
struct DemoRecord<'a> {
    id: &'a str,
    role: DemoRole,
    score: f64,
    rank: usize,
}

#[derive(Serialize)]
struct QueriesRecord<'a> {
    erroneous: &'a QueryRecord,
    correct: &'a QueryRecord,
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    index: usize,
    source: &'a str,
    hypothesis: &'a str,
    raw_response: &'a str,
    demos: Vec<DemoRecord<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    queries: Option<QueriesRecord<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detection_text: Option<&'a str>,
    flags: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// One JSON object per line, in input order. Failed items appear as
/// copy-through records flagged `item_failed`.
pub fn write_predictions_jsonl<W: Write>(out: &mut W, outcomes: &[ItemOutcome]) -> Result<()> {
    for o in outcomes {
        let record = match o {
            Ok(p) => PredictionRecord {
                index: p.index,
                source: &p.source,
                hypothesis: &p.hypothesis,
                raw_response: &p.raw_response,
                demos: p
                    .demo_set
                    .provenance
                    .iter()
                    .map(|d| DemoRecord {
                        id: &d.id,
                        role: d.role,
                        score: d.score,
                        rank: d.rank,
                    })
                    .collect(),
                queries: Some(QueriesRecord {
                    erroneous: &p.demo_set.erroneous_query,
                    correct: &p.demo_set.correct_query,
                }),
                detection_text: p.detection.as_ref().map(|d| d.initial_explanation.as_str()),
                flags: p.flags.clone(),
                error: None,
            },
            Err(f) => PredictionRecord {
                index: f.index,
                source: &f.source,
                hypothesis: &f.source,
                raw_response: "",
                demos: Vec::new(),
                queries: None,
                detection_text: None,
                flags: vec!["item_failed".to_owned(), "copy_through".to_owned()],
                error: Some(format!("{}: {}", f.stage, f.message)),
            },
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io("<predictions>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_c: usize,
    pub k_e: usize,
    pub report: ScoreReport,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub runs: Vec<BatchOutput>,
}

impl Sweep {
    /// The k_C with the highest F0.5; the smallest k_C wins ties.
    pub fn best_k_c(&self) -> Option<usize> {
        self.rows
            .iter()
            .fold(None::<&SweepRow>, |best, r| match best {
                Some(b) if b.report.f_half >= r.report.f_half => Some(b),
                _ => Some(r),
            })
            .map(|r| r.k_c)
    }
}

/// Runs and scores k_C = 0..=total with k_E = total - k_C. All runs share
/// one lineage id derived from the config with the demo counts cleared.
pub fn sweep_kc(
    sources: &[String],
    gold: &[GoldAnnotatedSample],
    dbs: &DatabasePair,
    config: &RunConfig,
    ctx: RunContext<'_>,
    total: usize,
) -> Result<Sweep> {
    if total == 0 {
        return Err(Error::Config("sweep total must be at least 1".into()));
    }
    let lineage = RunConfig {
        k_e: 0,
        k_c: 0,
        ..config.clone()
    }
    .lineage_id();
    let mode = TokenizationMode::for_language(&config.language);
    let mut rows = Vec::with_capacity(total + 1);
    let mut runs = Vec::with_capacity(total + 1);
    for k_c in 0..=total {
        let run_config = RunConfig {
            k_e: total - k_c,
            k_c,
            ..config.clone()
        };
        let out = run_batch_with_lineage(sources, dbs, &run_config, ctx, lineage.clone())?;
        let report = evaluate_run(&out.hypotheses(), gold, mode)?.report;
        rows.push(SweepRow {
            k_c,
            k_e: run_config.k_e,
            report,
            failures: out.manifest.failures,
        });
        runs.push(out);
    }
    Ok(Sweep { rows, runs })
}

/// `k_C\tP\tR\tF0.5` with four-decimal fractions.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k_C\tP\tR\tF0.5\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\n",
            r.k_c, r.report.precision, r.report.recall, r.report.f_half
        ));
    }
    out
}
