use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const EXPLANATION: &str = "explanation";
pub const EXPLANATION_WITH_EDITS: &str = "explanation-using-edits";
pub const DETECTION_DETAILED: &str = "detection-detailed";
pub const DETECTION_SHORT: &str = "detection-short";
pub const FEW_SHOT: &str = "few-shot";

/// Placeholder names a template body may require.
pub const KNOWN_PLACEHOLDERS: [&str; 4] = ["text", "label", "source", "edits"];

const BUILTIN: [(&str, &str); 5] = [
    (EXPLANATION, include_str!("../../prompts/explanation.txt")),
    (
        EXPLANATION_WITH_EDITS,
        include_str!("../../prompts/explanation-using-edits.txt"),
    ),
    (
        DETECTION_DETAILED,
        include_str!("../../prompts/detection-detailed.txt"),
    ),
    (DETECTION_SHORT, include_str!("../../prompts/detection-short.txt")),
    (FEW_SHOT, include_str!("../../prompts/few-shot.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    /// Every known placeholder that occurs in `body` becomes required.
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_placeholders = KNOWN_PLACEHOLDERS
            .iter()
            .filter(|p| body.contains(&format!("{{{p}}}")))
            .map(|p| p.to_string())
            .collect();
        Self {
            name: name.into(),
            body,
            required_placeholders,
        }
    }

    /// Single-pass substitution of `{name}` for every bound name. Braces not
    /// naming a binding are copied verbatim, and substituted values are never
    /// rescanned.
    pub fn render(&self, bindings: &HashMap<&str, &str>) -> Result<String> {
        if let Some(missing) = self
            .required_placeholders
            .iter()
            .find(|p| !bindings.contains_key(p.as_str()))
        {
            return Err(Error::UnboundPlaceholder(missing.clone()));
        }
        Ok(substitute(&self.body, bindings))
    }
}

pub(crate) fn substitute(body: &str, bindings: &HashMap<&str, &str>) -> String {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find(['}', '{']) {
            Some(close) if after.as_bytes()[close] == b'}' => {
                let name = &after[..close];
                if let Some(value) = bindings.get(name) {
                    out.push_str(value);
                } else {
                    out.push('{');
                    out.push_str(name);
                    out.push('}');
                }
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone)]
pub struct PromptCatalog {
    templates: BTreeMap<String, PromptTemplate>,
}

impl PromptCatalog {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, body)| (name.to_string(), PromptTemplate::new(*name, *body)))
            .collect();
        Self { templates }
    }

    /// Loads every `*.txt` file in `dir`; the template name is the file stem.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut templates = BTreeMap::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            templates.insert(name.to_owned(), PromptTemplate::new(name, body));
        }
        Ok(Self { templates })
    }

    /// Built-in templates, with any same-named files in `dir` taking precedence.
    pub fn builtin_with_overrides(dir: &Path) -> Result<Self> {
        let mut catalog = Self::builtin();
        catalog.templates.extend(Self::from_dir(dir)?.templates);
        Ok(catalog)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate> {
        self.templates.get(name).ok_or_else(|| Error::Template {
            name: name.to_owned(),
            message: "not in prompt catalog".into(),
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

impl Default for PromptCatalog {
    fn default() -> Self {
        Self::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bind<'a>(pairs: &[(&'a str, &'a str)]) -> HashMap<&'a str, &'a str> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn substitutes_source() {
        let t = PromptTemplate::new("t", "fix: {source}");
        assert_eq!(t.render(&bind(&[("source", "He go .")])).unwrap(), "fix: He go .");
    }

    #[test]
    fn detection_keeps_header() {
        let catalog = PromptCatalog::builtin();
        let out = catalog
            .get(DETECTION_DETAILED)
            .unwrap()
            .render(&bind(&[("source", "He go to school .")]))
            .unwrap();
        assert!(out.contains("[The given text]:\nHe go to school .\n"));
        assert!(out.ends_with("[Corrections made and the brief reasons for the errors]:"));
    }

    #[test]
    fn missing_label_is_named() {
        let catalog = PromptCatalog::builtin();
        let err = catalog
            .get(EXPLANATION)
            .unwrap()
            .render(&bind(&[("text", "x")]))
            .unwrap_err();
        assert_eq!(err.to_string(), "unbound placeholder: label");
    }

    #[test]
    fn extra_bindings_ignored_and_values_not_rescanned() {
        let t = PromptTemplate::new("t", "{text} -> {label}");
        let out = t
            .render(&bind(&[("text", "{label}"), ("label", "b"), ("zzz", "q")]))
            .unwrap();
        assert_eq!(out, "{label} -> b");
    }

    #[test]
    fn builtin_catalog_has_five_templates() {
        let c = PromptCatalog::builtin();
        assert_eq!(
            c.names().collect::<Vec<_>>(),
            [
                DETECTION_DETAILED,
                DETECTION_SHORT,
                EXPLANATION,
                EXPLANATION_WITH_EDITS,
                FEW_SHOT
            ]
        );
        assert_eq!(
            c.get(EXPLANATION).unwrap().required_placeholders,
            ["label", "text"].iter().map(|s| s.to_string()).collect()
        );
    }

    #[test]
    fn dir_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("detection-short.txt"), "check {source}").unwrap();
        std::fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let c = PromptCatalog::builtin_with_overrides(dir.path()).unwrap();
        assert_eq!(c.get(DETECTION_SHORT).unwrap().body, "check {source}");
        assert!(c.get(FEW_SHOT).is_ok());
        assert!(c.get("notes").is_err());
    }

    proptest! {
        // Characters outside placeholder spans are never altered.
        #[test]
        fn render_preserves_non_placeholder_text(
            pieces in prop::collection::vec(("[^{}]{0,12}", prop::option::of(0usize..4)), 0..8),
            values in prop::collection::vec("\\PC{0,8}", 4),
        ) {
            let mut body = String::new();
            let mut expected = String::new();
            for (lit, ph) in &pieces {
                body.push_str(lit);
                expected.push_str(lit);
                if let Some(i) = ph {
                    body.push_str(&format!("{{{}}}", KNOWN_PLACEHOLDERS[*i]));
                    expected.push_str(&values[*i]);
                }
            }
            let bindings: HashMap<&str, &str> = KNOWN_PLACEHOLDERS
                .iter()
                .zip(&values)
                .map(|(k, v)| (*k, v.as_str()))
                .collect();
            let t = PromptTemplate::new("fuzz", body);
            prop_assert_eq!(t.render(&bindings).unwrap(), expected);
        }

        #[test]
        fn bodies_without_bound_names_are_unchanged(body in "\\PC{0,60}") {
            prop_assert_eq!(substitute(&body, &HashMap::new()), body);
        }
    }
}
