use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gee_core::corpus::{
    filter_samples, parse_m2, parse_parallel, GoldAnnotatedSample, LengthFilter, ParallelFormat,
    TokenizationMode,
};
use gee_core::database::{self, build_database, BuildConfig, DatabasePair};
use gee_core::eval::{evaluate_run, gold_from_references};
use gee_core::llm::{LlmClient, PromptCatalog};
use gee_core::pipeline::{
    detect as run_detect, run_batch, sweep_kc, sweep_tsv, write_predictions_jsonl, BatchOutput,
    ExplanationMode, RunConfig, RunContext, Strategy,
};
use serde::Serialize;

use crate::backends::{self, REMOTE_IN_FLIGHT};
use crate::config::{default_jobs, readable_file, require, writable_output, Endpoints, FileConfig};
use crate::{
    AblateArgs, BuildDbArgs, DetectArgs, EvaluateArgs, GoldArgs, Outcome, PredictArgs, RunArgs, SharedArgs,
};

const DEFAULT_FAILURE_FRACTION: f64 = 0.05;
const DEFAULT_SEED: u64 = 42;

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))
}

fn catalog(prompt_dir: Option<&Path>) -> Result<PromptCatalog> {
    match prompt_dir {
        Some(dir) => PromptCatalog::builtin_with_overrides(dir)
            .with_context(|| format!("loading prompts from {}", dir.display())),
        None => Ok(PromptCatalog::builtin()),
    }
}

fn jobs(requested: Option<usize>, remote: bool) -> usize {
    let n = requested.unwrap_or_else(default_jobs).max(1);
    if remote && requested.is_none() {
        n.min(REMOTE_IN_FLIGHT)
    } else {
        n
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn corpus_format(path: &Path, flag: Option<&str>) -> Result<ParallelFormat> {
    match flag {
        Some("tsv") => Ok(ParallelFormat::Tsv),
        Some("jsonl") => Ok(ParallelFormat::Jsonl),
        Some(other) => bail!("unknown corpus format `{other}` (expected tsv or jsonl)"),
        None => ParallelFormat::from_path(path).with_context(|| {
            format!(
                "cannot tell the format of {} from its extension; pass --format",
                path.display()
            )
        }),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

#[derive(Serialize)]
struct ResolvedBuild {
    corpus: PathBuf,
    corpus_name: String,
    format: ParallelFormat,
    lang: String,
    db: PathBuf,
    teacher: String,
    teacher_model: String,
    embedder: String,
    filter: LengthFilter,
    seed: u64,
    explain_with_edits: bool,
    max_failure_fraction: f64,
    prompt_dir: Option<PathBuf>,
    endpoints: Endpoints,
    jobs: usize,
}

pub fn build_db(a: BuildDbArgs, file: &FileConfig) -> Result<Outcome> {
    let endpoints = Endpoints::resolve(file, a.shared.api_base, a.shared.cache_dir);
    let corpus = absolute(&require(a.corpus.or(file.corpus.clone()), "corpus")?)?;
    let db = absolute(&require(a.db.or(file.db.clone()), "db")?)?;
    let teacher = require(a.teacher.or(file.teacher.clone()), "teacher")?;
    let lang = a.lang.or(file.lang.clone()).unwrap_or_else(|| "en".into());
    let format = corpus_format(&corpus, a.format.as_deref())?;
    let filter = LengthFilter {
        min_tokens: a
            .min_tokens
            .or(file.min_tokens)
            .unwrap_or(LengthFilter::default().min_tokens),
        max_tokens: a
            .max_tokens
            .or(file.max_tokens)
            .unwrap_or(LengthFilter::default().max_tokens),
        cap: a.cap.or(file.cap).unwrap_or(LengthFilter::default().cap),
    };
    if filter.min_tokens > filter.max_tokens {
        bail!(
            "--min-tokens {} exceeds --max-tokens {}",
            filter.min_tokens,
            filter.max_tokens
        );
    }
    let max_failure_fraction = a
        .max_failure_fraction
        .or(file.max_failure_fraction)
        .unwrap_or(DEFAULT_FAILURE_FRACTION);
    if !(0.0..=1.0).contains(&max_failure_fraction) {
        bail!("--max-failure-fraction must lie in [0, 1]");
    }
    let prompt_dir = a
        .shared
        .prompt_dir
        .or(file.prompt_dir.clone())
        .map(|p| absolute(&p))
        .transpose()?;
    let corpus_name = a.corpus_name.unwrap_or_else(|| {
        corpus
            .file_stem()
            .map_or("corpus".into(), |s| s.to_string_lossy().into_owned())
    });

    readable_file(&corpus, "corpus")?;
    for sub in ["erroneous", "correct", "build_report.json"] {
        writable_output(&db.join(sub), a.shared.force)?;
    }
    let catalog = catalog(prompt_dir.as_deref())?;
    let (teacher_client, teacher_remote) = backends::client(
        &teacher,
        a.teacher_model.or(file.teacher_model.clone()).as_deref(),
        &endpoints,
    )?;
    let embedder_spec = a
        .embedder
        .or(file.embedder.clone())
        .unwrap_or_else(|| "hashed".into());
    let (embedder, embed_remote) = backends::embedder(&embedder_spec, &endpoints)?;
    let jobs = jobs(a.shared.jobs.or(file.jobs), teacher_remote || embed_remote);
    let seed = a.seed.or(file.seed).unwrap_or(DEFAULT_SEED);

    let samples = parse_parallel(open(&corpus)?, format, &corpus_name, &lang)
        .with_context(|| format!("reading corpus {}", corpus.display()))?;
    let kept = filter_samples(&samples, &filter, seed);
    log::info!(
        "{} of {} samples pass the length filter",
        kept.len(),
        samples.len()
    );

    let resolved = ResolvedBuild {
        corpus,
        corpus_name: corpus_name.clone(),
        format,
        lang: lang.clone(),
        db: db.clone(),
        teacher,
        teacher_model: teacher_client.model.clone(),
        embedder: embedder_spec,
        filter,
        seed,
        explain_with_edits: a.explain_with_edits || file.explain_with_edits.unwrap_or(false),
        max_failure_fraction,
        prompt_dir,
        endpoints,
        jobs,
    };
    let config = BuildConfig {
        explain_with_edits: resolved.explain_with_edits,
        corpus_name,
        language: lang,
        jobs,
        catalog,
    };
    let (pair, report) = build_database(&kept, &teacher_client, embedder.as_ref(), &config)?;
    database::persist_pair(&pair, &db)?;

    #[derive(Serialize)]
    struct ReportFile<'a> {
        #[serde(flatten)]
        report: &'a database::BuildReport,
        filtered_from: usize,
        resolved_config: &'a ResolvedBuild,
    }
    write_file(
        &db.join("build_report.json"),
        &pretty_json(&ReportFile {
            report: &report,
            filtered_from: samples.len(),
            resolved_config: &resolved,
        })?,
    )?;
    println!(
        "explained={} failed={} erroneous={} correct={} wall_seconds={:.2}",
        report.explained, report.failed, report.erroneous_count, report.correct_count, report.wall_seconds
    );
    if report.failure_fraction() > max_failure_fraction {
        eprintln!(
            "warning: {:.1}% of explanations failed (threshold {:.1}%)",
            report.failure_fraction() * 100.0,
            max_failure_fraction * 100.0
        );
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Success)
}

/// Test sentences: the input column of a .tsv/.jsonl parallel file, or one
/// non-blank line per sentence.
fn read_sources(path: &Path, lang: &str) -> Result<Vec<String>> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") => Some(ParallelFormat::Tsv),
        Some("jsonl") => Some(ParallelFormat::Jsonl),
        _ => None,
    };
    if let Some(format) = format {
        let samples = parse_parallel(open(path)?, format, "test", lang)
            .with_context(|| format!("reading {}", path.display()))?;
        return Ok(samples.into_iter().map(|s| s.input_text).collect());
    }
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ResolvedRun {
    db: PathBuf,
    input: PathBuf,
    output: PathBuf,
    predictor: String,
    predictor_model: String,
    embedder: String,
    prompt_dir: Option<PathBuf>,
    endpoints: Endpoints,
    jobs: usize,
    run: RunConfig,
}

/// Everything a prediction run needs, resolved and validated before any backend call.
struct PreparedRun {
    resolved: ResolvedRun,
    config: RunConfig,
    dbs: DatabasePair,
    sources: Vec<String>,
    predictor: LlmClient,
    embedder: Box<dyn gee_core::embed::Embedder>,
    catalog: PromptCatalog,
    force: bool,
    save_prompts: bool,
}

impl PreparedRun {
    fn context(&self) -> RunContext<'_> {
        RunContext {
            predictor: &self.predictor,
            embedder: self.embedder.as_ref(),
            catalog: &self.catalog,
        }
    }
}

fn prepare_run(a: RunArgs, file: &FileConfig, outputs: &[&str]) -> Result<PreparedRun> {
    let SharedArgs {
        cache_dir,
        api_base,
        prompt_dir,
        jobs: jobs_flag,
        force,
    } = a.shared;
    let endpoints = Endpoints::resolve(file, api_base, cache_dir);
    let db = absolute(&require(a.db.or(file.db.clone()), "db")?)?;
    let input = absolute(&require(a.input.or(file.input.clone()), "input")?)?;
    let output = absolute(&require(a.output.or(file.output.clone()), "output")?)?;
    let strategy: Strategy = a
        .strategy
        .or(file.strategy.clone())
        .map_or(Ok(Strategy::Explanation), |s| s.parse())?;
    let explanation_mode: ExplanationMode = a
        .explanation_mode
        .or(file.explanation_mode.clone())
        .map_or(Ok(ExplanationMode::None), |s| s.parse())?;
    let Some(predictor_spec) = a.predictor.or(file.predictor.clone()) else {
        if strategy == Strategy::Explanation {
            bail!("--strategy explanation needs a predictor backend for detection (--predictor)");
        }
        bail!("missing required option --predictor (flag or config file)");
    };
    let prompt_dir = prompt_dir
        .or(file.prompt_dir.clone())
        .map(|p| absolute(&p))
        .transpose()?;

    if !db.join("erroneous").is_dir() || !db.join("correct").is_dir() {
        bail!(
            "{} is not a database directory (run build-db first)",
            db.display()
        );
    }
    readable_file(&input, "input")?;
    for name in outputs {
        writable_output(&output.join(name), force)?;
    }
    if a.save_prompts {
        writable_output(&output.join(PROMPTS_FILE), force)?;
    }

    let catalog = catalog(prompt_dir.as_deref())?;
    let dbs = database::load_pair(&db).with_context(|| format!("loading database {}", db.display()))?;
    let lang = a
        .lang
        .or(file.lang.clone())
        .unwrap_or_else(|| dbs.erroneous.manifest().language.clone());
    let (predictor, predictor_remote) = backends::client(
        &predictor_spec,
        a.predictor_model.or(file.predictor_model.clone()).as_deref(),
        &endpoints,
    )?;
    let embedder_spec = a
        .embedder
        .or(file.embedder.clone())
        .unwrap_or_else(|| "hashed".into());
    let (embedder, embed_remote) = backends::embedder(&embedder_spec, &endpoints)?;
    let jobs = jobs(jobs_flag.or(file.jobs), predictor_remote || embed_remote);

    let config = RunConfig {
        k_e: a.k_e.or(file.k_e).unwrap_or(4),
        k_c: a.k_c.or(file.k_c).unwrap_or(4),
        strategy,
        seed: a.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        explanation_mode,
        predictor_model: predictor.model.clone(),
        detection_template: a
            .detection_template
            .or(file.detection_template.clone())
            .unwrap_or_else(|| RunConfig::default().detection_template),
        explanation_bm25: a.explanation_bm25 || file.explanation_bm25.unwrap_or(false),
        include_source_matches: a.include_source_matches || file.include_source_matches.unwrap_or(false),
        language: lang.clone(),
        jobs,
    };
    config.validate(&catalog)?;
    let sources = read_sources(&input, &lang)?;

    Ok(PreparedRun {
        resolved: ResolvedRun {
            db,
            input,
            output,
            predictor: predictor_spec,
            predictor_model: predictor.model.clone(),
            embedder: embedder_spec,
            prompt_dir,
            endpoints,
            jobs,
            run: config.clone(),
        },
        config,
        dbs,
        sources,
        predictor,
        embedder,
        catalog,
        force,
        save_prompts: a.save_prompts,
    })
}

const PROMPTS_FILE: &str = "prompts.jsonl";

fn write_run(dir: &Path, out: &mut BatchOutput, resolved: &ResolvedRun, save_prompts: bool) -> Result<()> {
    out.manifest.resolved_config = Some(serde_json::to_value(resolved)?);
    if save_prompts {
        let mut buf = Vec::new();
        for p in out.outcomes.iter().flatten() {
            serde_json::to_writer(
                &mut buf,
                &serde_json::json!({"index": p.index, "prompt": p.prompt}),
            )?;
            buf.push(b'\n');
        }
        write_file(&dir.join(PROMPTS_FILE), &buf)?;
    }
    let mut predictions = Vec::new();
    write_predictions_jsonl(&mut predictions, &out.outcomes)?;
    write_file(&dir.join("predictions.jsonl"), &predictions)?;
    let mut hypotheses = out.hypotheses().join("\n");
    hypotheses.push('\n');
    write_file(&dir.join("hypotheses.txt"), hypotheses.as_bytes())?;
    write_file(&dir.join("run.json"), &pretty_json(&out.manifest)?)
}

const RUN_OUTPUTS: [&str; 3] = ["predictions.jsonl", "hypotheses.txt", "run.json"];

pub fn predict(a: PredictArgs, file: &FileConfig) -> Result<Outcome> {
    let prep = prepare_run(a.run, file, &RUN_OUTPUTS)?;
    let mut out = run_batch(&prep.sources, &prep.dbs, &prep.config, prep.context())?;
    write_run(&prep.resolved.output, &mut out, &prep.resolved, prep.save_prompts)?;
    for w in &out.manifest.warnings {
        eprintln!("warning: {w}");
    }
    let failures = out.manifest.failures;
    println!(
        "predicted {} of {} items -> {}",
        out.manifest.items - failures,
        out.manifest.items,
        prep.resolved.output.join("predictions.jsonl").display()
    );
    if failures > 0 {
        for f in out.failures() {
            eprintln!("item {} failed at {}: {}", f.index, f.stage, f.message);
        }
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Success)
}

fn load_gold(
    args: &GoldArgs,
    file: &FileConfig,
    mode: TokenizationMode,
    lang: &str,
) -> Result<Vec<GoldAnnotatedSample>> {
    let path = absolute(&require(args.gold.clone().or(file.gold.clone()), "gold")?)?;
    readable_file(&path, "gold")?;
    let format = args
        .gold_format
        .clone()
        .or(file.gold_format.clone())
        .unwrap_or_else(|| {
            if path.extension().is_some_and(|e| e == "m2") {
                "m2".into()
            } else {
                "parallel".into()
            }
        });
    match format.as_str() {
        "m2" => parse_m2(open(&path)?).with_context(|| format!("reading M2 gold {}", path.display())),
        "parallel" => {
            let fmt = ParallelFormat::from_path(&path).unwrap_or(ParallelFormat::Tsv);
            let samples = parse_parallel(open(&path)?, fmt, "gold", lang)
                .with_context(|| format!("reading gold {}", path.display()))?;
            let sources: Vec<String> = samples.iter().map(|s| s.input_text.clone()).collect();
            let refs: Vec<String> = samples.into_iter().map(|s| s.corrected_text).collect();
            Ok(gold_from_references(&sources, &[refs], mode)?)
        }
        other => bail!("unknown gold format `{other}` (expected m2 or parallel)"),
    }
}

fn read_hypotheses(path: &Path) -> Result<Vec<String>> {
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        if jsonl {
            let v: serde_json::Value =
                serde_json::from_str(&line).with_context(|| format!("{} line {}", path.display(), n + 1))?;
            let Some(h) = v.get("hypothesis").and_then(|h| h.as_str()) else {
                bail!("{} line {}: missing \"hypothesis\"", path.display(), n + 1);
            };
            out.push(h.to_owned());
        } else {
            out.push(line);
        }
    }
    Ok(out)
}

pub fn evaluate(a: EvaluateArgs, file: &FileConfig) -> Result<Outcome> {
    let predictions = absolute(&a.predictions)?;
    readable_file(&predictions, "predictions")?;
    let output = match a.output {
        Some(dir) => absolute(&dir)?,
        None => predictions.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    writable_output(&output.join("report.json"), a.force)?;
    if a.diagnostics {
        writable_output(&output.join("diagnostics.jsonl"), a.force)?;
    }
    let lang = a.lang.or(file.lang.clone()).unwrap_or_else(|| "en".into());
    let mode = TokenizationMode::for_language(&lang);
    let gold = load_gold(&a.gold, file, mode, &lang)?;
    let hypotheses = read_hypotheses(&predictions)?;
    let evaluation = evaluate_run(&hypotheses, &gold, mode)?;

    write_file(&output.join("report.json"), &pretty_json(&evaluation.report)?)?;
    if a.diagnostics {
        let mut buf = Vec::new();
        for s in &evaluation.sentences {
            serde_json::to_writer(&mut buf, s)?;
            buf.push(b'\n');
        }
        write_file(&output.join("diagnostics.jsonl"), &buf)?;
    }
    println!("{}", evaluation.report);
    Ok(Outcome::Success)
}

pub fn ablate(a: AblateArgs, file: &FileConfig) -> Result<Outcome> {
    let total = a.total.or(file.total).unwrap_or(8);
    if total == 0 {
        bail!("--total must be at least 1");
    }
    let mut prep = prepare_run(a.run, file, &["sweep.tsv", "summary.txt", "runs"])?;
    let mode = TokenizationMode::for_language(&prep.config.language);
    let gold = load_gold(&a.gold, file, mode, &prep.config.language)?;
    if gold.len() != prep.sources.len() {
        bail!(
            "input has {} sentences but gold has {}",
            prep.sources.len(),
            gold.len()
        );
    }
    let sweep = sweep_kc(
        &prep.sources,
        &gold,
        &prep.dbs,
        &prep.config,
        prep.context(),
        total,
    )?;
    let output = prep.resolved.output.clone();
    if prep.force && output.join("runs").exists() {
        std::fs::remove_dir_all(output.join("runs"))
            .with_context(|| format!("clearing {}", output.join("runs").display()))?;
    }
    let best = sweep.best_k_c().expect("sweep has rows");
    let mut failures = 0;
    for (row, mut run) in sweep.rows.iter().zip(sweep.runs) {
        prep.resolved.run.k_e = row.k_e;
        prep.resolved.run.k_c = row.k_c;
        write_run(
            &output.join("runs").join(format!("k_c_{}", row.k_c)),
            &mut run,
            &prep.resolved,
            prep.save_prompts,
        )?;
        failures += row.failures;
    }
    let tsv = sweep_tsv(&sweep.rows);
    write_file(&output.join("sweep.tsv"), tsv.as_bytes())?;
    let best_row = &sweep.rows[best];
    let summary = format!(
        "best k_C = {best} (k_E = {}): P={:.4} R={:.4} F0.5={:.4}\n",
        best_row.k_e, best_row.report.precision, best_row.report.recall, best_row.report.f_half
    );
    write_file(&output.join("summary.txt"), summary.as_bytes())?;
    print!("{tsv}{summary}");
    if failures > 0 {
        eprintln!("{failures} item failure(s) across the sweep");
        return Ok(Outcome::Partial);
    }
    Ok(Outcome::Success)
}

pub fn detect(a: DetectArgs, file: &FileConfig) -> Result<Outcome> {
    let endpoints = Endpoints::resolve(file, a.shared.api_base, a.shared.cache_dir);
    let predictor_spec = require(a.predictor.or(file.predictor.clone()), "predictor")?;
    let template = a
        .detection_template
        .or(file.detection_template.clone())
        .unwrap_or_else(|| RunConfig::default().detection_template);
    let prompt_dir = a.shared.prompt_dir.or(file.prompt_dir.clone());
    let db = a.db.or(file.db.clone());
    if let Some(db) = &db {
        if !db.join("erroneous").is_dir() {
            bail!("{} is not a database directory", db.display());
        }
    }
    let catalog = catalog(prompt_dir.as_deref())?;
    let (predictor, _) = backends::client(
        &predictor_spec,
        a.predictor_model.or(file.predictor_model.clone()).as_deref(),
        &endpoints,
    )?;
    let detection = run_detect(&predictor, &catalog, &a.sentence, &template)?;
    println!("{}", detection.initial_explanation);
    if let Some(db) = db {
        let erroneous = database::load(&db.join("erroneous"))?;
        let k = a.k.unwrap_or(4);
        let hits = if a.bm25 {
            erroneous.bm25_query(&detection.initial_explanation, k)
        } else {
            let spec = a
                .embedder
                .or(file.embedder.clone())
                .unwrap_or_else(|| "hashed".into());
            let (embedder, _) = backends::embedder(&spec, &endpoints)?;
            if detection.is_empty() {
                eprintln!("warning: empty detection output; querying with the sentence instead");
                erroneous.knn_query(&a.sentence, k, embedder.as_ref())?
            } else {
                erroneous.knn_query(&detection.initial_explanation, k, embedder.as_ref())?
            }
        };
        for w in &hits.warnings {
            eprintln!("warning: {w}");
        }
        println!("--- top {} keys", hits.hits.len());
        for h in hits.hits {
            println!(
                "{}\t{:.6}\t{}\t{}",
                h.rank,
                h.score,
                h.sample.id,
                h.key_text.replace('\n', " ")
            );
        }
    }
    Ok(Outcome::Success)
}
