use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DatabasePair, DbEntry, DbKind, ManifestInfo, SampleDatabase};
use crate::corpus::{split_by_correctness, tokenize, Sample, TokenizationMode};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::eval::{extract_edits, EditSpan};
use crate::llm::{template, BackendError, LlmClient, PromptCatalog, ANALYSIS_MAX_TOKENS};

/// An erroneous sample with the teacher's explanation of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainedSample {
    pub sample: Sample,
    pub explanation: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ExplanationFailure {
    #[error("sample is not erroneous")]
    NotErroneous,
    #[error("no edits between input and correction")]
    NoEdits,
    #[error("empty explanation")]
    EmptyResponse,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] Error),
}

fn finish(sample: &Sample, text: String) -> Result<ExplainedSample, ExplanationFailure> {
    if text.trim().is_empty() {
        return Err(ExplanationFailure::EmptyResponse);
    }
    Ok(ExplainedSample {
        sample: sample.clone(),
        explanation: text,
    })
}

pub fn generate_explanation(
    teacher: &LlmClient,
    catalog: &PromptCatalog,
    sample: &Sample,
) -> Result<ExplainedSample, ExplanationFailure> {
    if !sample.is_erroneous() {
        return Err(ExplanationFailure::NotErroneous);
    }
    let prompt = catalog.get(template::EXPLANATION)?.render(&HashMap::from([
        ("text", sample.input_text.as_str()),
        ("label", sample.corrected_text.as_str()),
    ]))?;
    let response = teacher.complete_prompt(&prompt, ANALYSIS_MAX_TOKENS)?;
    finish(sample, response.text)
}

/// One line per edit: `insert "r" between "a" and "b"`, `replace "s" with "r"`,
/// `delete "s"`. Insertions at a sentence boundary name the single neighbor.
pub fn format_edit_lines(source_tokens: &[String], edits: &[EditSpan], mode: TokenizationMode) -> String {
    let joiner = mode.joiner();
    edits
        .iter()
        .map(|e| {
            let span = source_tokens[e.start..e.end].join(joiner);
            if e.is_insertion() {
                let left = e.start.checked_sub(1).map(|i| source_tokens[i].as_str());
                let right = source_tokens.get(e.start).map(String::as_str);
                match (left, right) {
                    (Some(l), Some(r)) => format!("insert \"{}\" between \"{l}\" and \"{r}\"", e.replacement),
                    (None, Some(r)) => format!("insert \"{}\" before \"{r}\"", e.replacement),
                    (Some(l), None) => format!("insert \"{}\" after \"{l}\"", e.replacement),
                    (None, None) => format!("insert \"{}\"", e.replacement),
                }
            } else if e.is_deletion() {
                format!("delete \"{span}\"")
            } else {
                format!("replace \"{span}\" with \"{}\"", e.replacement)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn generate_explanation_with_edits(
    teacher: &LlmClient,
    catalog: &PromptCatalog,
    sample: &Sample,
    edits: &[EditSpan],
) -> Result<ExplainedSample, ExplanationFailure> {
    if !sample.is_erroneous() {
        return Err(ExplanationFailure::NotErroneous);
    }
    if edits.is_empty() {
        return Err(ExplanationFailure::NoEdits);
    }
    let mode = TokenizationMode::for_language(&sample.language);
    let source = tokenize(&sample.input_text, mode);
    let lines = format_edit_lines(&source.tokens, edits, mode);
    let prompt = catalog
        .get(template::EXPLANATION_WITH_EDITS)?
        .render(&HashMap::from([
            ("text", sample.input_text.as_str()),
            ("label", sample.corrected_text.as_str()),
            ("edits", lines.as_str()),
        ]))?;
    let response = teacher.complete_prompt(&prompt, ANALYSIS_MAX_TOKENS)?;
    finish(sample, response.text)
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub explain_with_edits: bool,
    pub corpus_name: String,
    pub language: String,
    /// Worker threads; 0 uses rayon's default.
    pub jobs: usize,
    pub catalog: PromptCatalog,
}

impl BuildConfig {
    pub fn new(corpus_name: impl Into<String>, language: impl Into<String>) -> Self {
        Self {
            explain_with_edits: false,
            corpus_name: corpus_name.into(),
            language: language.into(),
            jobs: 0,
            catalog: PromptCatalog::builtin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub explained: usize,
    pub failed: usize,
    pub correct_count: usize,
    pub erroneous_count: usize,
    pub wall_seconds: f64,
    pub failures: Vec<SampleFailure>,
}

impl BuildReport {
    pub fn failure_fraction(&self) -> f64 {
        let attempted = self.explained + self.failed;
        if attempted == 0 {
            0.0
        } else {
            self.failed as f64 / attempted as f64
        }
    }
}

fn failure(id: &str, stage: &str, message: impl ToString) -> SampleFailure {
    SampleFailure {
        id: id.to_owned(),
        stage: stage.to_owned(),
        message: message.to_string(),
    }
}

fn explain_one(
    teacher: &LlmClient,
    embedder: &dyn Embedder,
    config: &BuildConfig,
    sample: &Sample,
) -> Result<DbEntry, SampleFailure> {
    let explained = if config.explain_with_edits {
        let mode = TokenizationMode::for_language(&sample.language);
        let edits = extract_edits(
            &tokenize(&sample.input_text, mode),
            &tokenize(&sample.corrected_text, mode),
        );
        generate_explanation_with_edits(teacher, &config.catalog, sample, &edits)
    } else {
        generate_explanation(teacher, &config.catalog, sample)
    }
    .map_err(|e| failure(&sample.id, "explain", e))?;
    let key_vector = embedder
        .embed(&explained.explanation)
        .map_err(|e| failure(&sample.id, "embed", e))?;
    let input_vector = embedder
        .embed(&sample.input_text)
        .map_err(|e| failure(&sample.id, "embed", e))?;
    Ok(DbEntry {
        sample: explained.sample,
        key_text: explained.explanation,
        key_vector,
        input_vector: Some(input_vector),
    })
}

fn embed_correct(embedder: &dyn Embedder, sample: &Sample) -> Result<DbEntry, SampleFailure> {
    let key_vector = embedder
        .embed(&sample.input_text)
        .map_err(|e| failure(&sample.id, "embed", e))?;
    Ok(DbEntry {
        sample: sample.clone(),
        key_text: sample.input_text.clone(),
        key_vector,
        input_vector: None,
    })
}

/// Splits, explains and embeds `samples` into the two databases. Per-sample
/// failures land in the report; entry order follows the input order.
pub fn build_database(
    samples: &[Sample],
    teacher: &LlmClient,
    embedder: &dyn Embedder,
    config: &BuildConfig,
) -> Result<(DatabasePair, BuildReport)> {
    let started = Instant::now();
    let (erroneous, correct) = split_by_correctness(samples);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let (err_results, corr_results): (Vec<_>, Vec<_>) = pool.install(|| {
        let err: Vec<Result<DbEntry, SampleFailure>> = erroneous
            .par_iter()
            .map(|s| explain_one(teacher, embedder, config, s))
            .collect();
        let corr: Vec<Result<DbEntry, SampleFailure>> =
            correct.par_iter().map(|s| embed_correct(embedder, s)).collect();
        (err, corr)
    });

    let mut failures = Vec::new();
    let mut err_entries = Vec::new();
    for r in err_results {
        match r {
            Ok(e) => err_entries.push(e),
            Err(f) => {
                log::warn!("sample {} failed at {}: {}", f.id, f.stage, f.message);
                failures.push(f);
            }
        }
    }
    let explained = err_entries.len();
    let explain_failed = failures.len();
    let mut corr_entries = Vec::new();
    for r in corr_results {
        match r {
            Ok(e) => corr_entries.push(e),
            Err(f) => {
                log::warn!("sample {} failed at {}: {}", f.id, f.stage, f.message);
                failures.push(f);
            }
        }
    }

    let info = |teacher_used: bool| ManifestInfo {
        teacher_model: teacher_used.then(|| teacher.model.clone()),
        teacher_backend: teacher_used.then(|| teacher.backend_id().to_owned()),
        embedder_id: embedder.id().to_owned(),
        corpus_name: config.corpus_name.clone(),
        language: config.language.clone(),
        built_at: crate::unix_timestamp(),
    };
    let report = BuildReport {
        explained,
        failed: explain_failed,
        correct_count: corr_entries.len(),
        erroneous_count: erroneous.len(),
        wall_seconds: crate::elapsed_seconds(started),
        failures,
    };
    let pair = DatabasePair {
        erroneous: SampleDatabase::new(DbKind::Erroneous, err_entries, info(true))?,
        correct: SampleDatabase::new(DbKind::Correct, corr_entries, info(false))?,
    };
    Ok((pair, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::HashedNgramEmbedder;
    use crate::llm::{Backend, CompletionRequest, CompletionResponse, MockBackend};
    use std::sync::{Arc, Mutex};

    struct Recording {
        inner: MockBackend,
        prompts: Mutex<Vec<String>>,
    }

    impl Backend for Recording {
        fn id(&self) -> &str {
            self.inner.id()
        }
        fn complete(&self, r: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
            self.prompts
                .lock()
                .unwrap()
                .push(r.last_user_content().unwrap().to_owned());
            self.inner.complete(r)
        }
    }

    fn recording(text: &str) -> (Arc<Recording>, LlmClient) {
        let rec = Arc::new(Recording {
            inner: MockBackend::fixed(text),
            prompts: Mutex::new(Vec::new()),
        });
        let client = LlmClient::new(rec.clone(), "teacher");
        (rec, client)
    }

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    #[test]
    fn explanation_prompt_binds_text_and_label() {
        let (rec, client) = recording("Error: verb agreement; 'go'→'goes'");
        let s = Sample::new("t:1", "He go to school .", "He goes to school .", "en");
        let out = generate_explanation(&client, &PromptCatalog::builtin(), &s).unwrap();
        assert_eq!(out.explanation, "Error: verb agreement; 'go'→'goes'");
        let prompt = rec.prompts.lock().unwrap()[0].clone();
        assert!(prompt.contains("[The given text]:\nHe go to school ."));
        assert!(prompt.contains("[The corrected version]:\nHe goes to school ."));
    }

    #[test]
    fn empty_response_fails() {
        let (_, client) = recording("  \n");
        let s = Sample::new("t:1", "He go to school .", "He goes to school .", "en");
        assert!(matches!(
            generate_explanation(&client, &PromptCatalog::builtin(), &s),
            Err(ExplanationFailure::EmptyResponse)
        ));
    }

    #[test]
    fn edit_lines_follow_phrasing() {
        let src = toks("He go to school .");
        let m = TokenizationMode::Whitespace;
        let rep = EditSpan {
            start: 1,
            end: 2,
            replacement: "goes".into(),
        };
        assert_eq!(format_edit_lines(&src, &[rep], m), "replace \"go\" with \"goes\"");
        let ins = EditSpan {
            start: 3,
            end: 3,
            replacement: "the".into(),
        };
        assert_eq!(
            format_edit_lines(&src, &[ins], m),
            "insert \"the\" between \"to\" and \"school\""
        );
        let del = EditSpan {
            start: 2,
            end: 3,
            replacement: String::new(),
        };
        assert_eq!(format_edit_lines(&src, &[del], m), "delete \"to\"");
    }

    #[test]
    fn edits_prompt_carries_lines() {
        let (rec, client) = recording("because");
        let s = Sample::new("t:1", "He go to school .", "He goes to school .", "en");
        let edits = vec![EditSpan {
            start: 1,
            end: 2,
            replacement: "goes".into(),
        }];
        generate_explanation_with_edits(&client, &PromptCatalog::builtin(), &s, &edits).unwrap();
        assert!(rec.prompts.lock().unwrap()[0].contains("\nreplace \"go\" with \"goes\"\n"));
        assert!(matches!(
            generate_explanation_with_edits(&client, &PromptCatalog::builtin(), &s, &[]),
            Err(ExplanationFailure::NoEdits)
        ));
    }

    fn ten_samples() -> Vec<Sample> {
        (0..10)
            .map(|i| {
                let x = format!("sentence number {i} are here .");
                let y = if i < 6 {
                    format!("sentence number {i} is here .")
                } else {
                    x.clone()
                };
                Sample::new(format!("c:{i}"), x, y, "en")
            })
            .collect()
    }

    #[test]
    fn build_partitions_and_keys() {
        let (_, client) = recording("subject-verb agreement");
        let (pair, report) = build_database(
            &ten_samples(),
            &client,
            &HashedNgramEmbedder::default(),
            &BuildConfig::new("toy", "en"),
        )
        .unwrap();
        assert_eq!(pair.erroneous.len(), 6);
        assert_eq!(pair.correct.len(), 4);
        assert_eq!((report.explained, report.failed, report.correct_count), (6, 0, 4));
        for e in pair.erroneous.entries() {
            assert_eq!(e.key_text, "subject-verb agreement");
            assert_ne!(e.key_text, e.sample.input_text);
        }
        for e in pair.correct.entries() {
            assert_eq!(e.key_text, e.sample.input_text);
        }
        assert_eq!(
            pair.erroneous.manifest().teacher_model.as_deref(),
            Some("teacher")
        );
    }

    #[test]
    fn failed_explanations_are_excluded() {
        let (_, client) = recording("");
        let (pair, report) = build_database(
            &ten_samples(),
            &client,
            &HashedNgramEmbedder::default(),
            &BuildConfig::new("toy", "en"),
        )
        .unwrap();
        assert_eq!(pair.erroneous.len(), 0);
        assert_eq!(report.failed, 6);
        assert_eq!(report.failures.len(), 6);
        assert!((report.failure_fraction() - 1.0).abs() < 1e-12);
    }
}
