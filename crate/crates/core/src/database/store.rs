use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatabasePair, DbEntry, DbKind, Manifest, SampleDatabase};
use crate::corpus::Sample;
use crate::embed::EmbeddingVector;
use crate::error::{Error, Result};

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const ENTRIES: &str = "entries.jsonl";

#[derive(Serialize)]
struct EntryOut<'a> {
    id: &'a str,
    key_text: &'a str,
    input_text: &'a str,
    corrected_text: &'a str,
    vector: &'a [f32],
    #[serde(skip_serializing_if = "Option::is_none")]
    input_vector: Option<&'a [f32]>,
}

#[derive(Deserialize)]
struct EntryIn {
    id: String,
    key_text: String,
    input_text: String,
    corrected_text: String,
    vector: Vec<f32>,
    #[serde(default)]
    input_vector: Option<Vec<f32>>,
}

pub(crate) fn entries_jsonl(entries: &[DbEntry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(
            &mut out,
            &EntryOut {
                id: &e.sample.id,
                key_text: &e.key_text,
                input_text: &e.sample.input_text,
                corrected_text: &e.sample.corrected_text,
                vector: e.key_vector.values(),
                input_vector: e.input_vector.as_ref().map(EmbeddingVector::values),
            },
        )?;
        out.push(b'\n');
    }
    Ok(out)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io(path, e))
}

/// Writes `entries.jsonl` then `manifest.json`, each through a temp-file rename.
pub fn persist(db: &SampleDatabase, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    write_atomic(&dir.join(ENTRIES), &entries_jsonl(db.entries())?)?;
    let mut manifest = serde_json::to_vec_pretty(db.manifest())?;
    manifest.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &manifest)
}

pub fn load(dir: &Path) -> Result<SampleDatabase> {
    let manifest_path = dir.join(MANIFEST);
    let raw = std::fs::read(&manifest_path).map_err(|e| io(&manifest_path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| Error::Corruption(format!("{}: {e}", manifest_path.display())))?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64);
    if found != Some(u64::from(FORMAT_VERSION)) {
        return Err(Error::VersionMismatch {
            found: found.map_or(0, |v| u32::try_from(v).unwrap_or(u32::MAX)),
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| Error::Corruption(format!("{}: {e}", manifest_path.display())))?;

    let entries_path = dir.join(ENTRIES);
    let bytes = std::fs::read(&entries_path).map_err(|e| io(&entries_path, e))?;
    let digest = crate::llm::sha256_hex(&bytes);
    if digest != manifest.entries_sha256 {
        return Err(Error::Corruption(format!(
            "{}: checksum {digest} does not match manifest {}",
            entries_path.display(),
            manifest.entries_sha256
        )));
    }
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::Corruption(format!("{}: {e}", entries_path.display())))?;
    let mut entries = Vec::with_capacity(manifest.count);
    for (n, line) in text.lines().enumerate() {
        let e: EntryIn = serde_json::from_str(line)
            .map_err(|err| Error::Corruption(format!("{} line {}: {err}", entries_path.display(), n + 1)))?;
        entries.push(DbEntry {
            sample: Sample::new(e.id, e.input_text, e.corrected_text, manifest.language.clone()),
            key_text: e.key_text,
            key_vector: EmbeddingVector::from_stored(e.vector),
            input_vector: e.input_vector.map(EmbeddingVector::from_stored),
        });
    }
    if entries.len() != manifest.count {
        return Err(Error::Corruption(format!(
            "manifest count {} but {} entries",
            manifest.count,
            entries.len()
        )));
    }
    if let Some(bad) = entries
        .iter()
        .find(|e| e.key_vector.dimension() != manifest.dimension)
    {
        return Err(Error::Corruption(format!(
            "entry `{}` has dimension {}, manifest says {}",
            bad.sample.id,
            bad.key_vector.dimension(),
            manifest.dimension
        )));
    }
    for e in &entries {
        let input_dim = e.input_vector.as_ref().map(EmbeddingVector::dimension);
        let ok = match manifest.kind {
            DbKind::Erroneous => input_dim == Some(manifest.dimension),
            DbKind::Correct => input_dim.is_none(),
        };
        if !ok {
            return Err(Error::Corruption(format!(
                "entry `{}` has a missing or mismatched input vector",
                e.sample.id
            )));
        }
    }
    Ok(SampleDatabase::from_parts(entries, manifest))
}

/// `<dir>/erroneous` and `<dir>/correct`.
pub fn persist_pair(pair: &DatabasePair, dir: &Path) -> Result<()> {
    persist(&pair.erroneous, &dir.join("erroneous"))?;
    persist(&pair.correct, &dir.join("correct"))
}

pub fn load_pair(dir: &Path) -> Result<DatabasePair> {
    let erroneous = load(&dir.join("erroneous"))?;
    let correct = load(&dir.join("correct"))?;
    for (db, want) in [(&erroneous, DbKind::Erroneous), (&correct, DbKind::Correct)] {
        if db.kind() != want {
            return Err(Error::Corruption(format!(
                "database kind {:?} where {want:?} expected",
                db.kind()
            )));
        }
    }
    Ok(DatabasePair { erroneous, correct })
}
